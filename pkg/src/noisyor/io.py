"""File formats: bit-packed datasets, layered topologies, ground-truth sidecars, CSV.

Every writer goes through :func:`atomic_write`, so readers never observe a
partially written file.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile

import numpy as np

from .network import dumps as dump_network
from .network import loads as load_network

NBIN_MAGIC = "NBIN 1"
GT_MAGIC = "NORGT 1"


def atomic_write(path, data):
    """Write ``data`` (str or bytes) to ``path`` via a temporary file and rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- NBIN ----------------------------------------------------------------------

def encode_nbin(X):
    X = np.asarray(X)
    if X.ndim != 2:
        raise ValueError("NBIN stores 2-D matrices")
    if X.size and not np.all((X == 0) | (X == 1)):
        raise ValueError("NBIN stores binary values only")
    rows, cols = X.shape
    header = f"{NBIN_MAGIC}\n{rows} {cols}\n".encode()
    packed = np.packbits(X.astype(np.uint8), axis=1, bitorder="little") if cols else np.zeros((rows, 0), np.uint8)
    return header + packed.tobytes()


def decode_nbin(blob):
    first = blob.find(b"\n")
    second = blob.find(b"\n", first + 1)
    if first < 0 or second < 0 or blob[:first].decode(errors="replace") != NBIN_MAGIC:
        raise ValueError("not an NBIN 1 file")
    try:
        rows, cols = (int(v) for v in blob[first + 1:second].split())
    except ValueError as exc:
        raise ValueError("malformed NBIN header") from exc
    if rows < 0 or cols < 0:
        raise ValueError("malformed NBIN header")
    stride = (cols + 7) // 8
    body = np.frombuffer(blob[second + 1:], dtype=np.uint8)
    if body.size != rows * stride:
        raise ValueError(f"NBIN body has {body.size} bytes, expected {rows * stride}")
    if cols == 0:
        return np.zeros((rows, 0), dtype=np.int8)
    bits = np.unpackbits(body.reshape(rows, stride), axis=1, count=cols, bitorder="little")
    return bits.astype(np.int8)


def write_nbin(path, X):
    atomic_write(path, encode_nbin(X))


def read_nbin(path):
    with open(path, "rb") as fh:
        return decode_nbin(fh.read())


# -- models ----------------------------------------------------------------------

def write_network(path, net):
    atomic_write(path, dump_network(net))


def read_network(path):
    with open(path) as fh:
        return load_network(fh.read())


# -- layered topology ------------------------------------------------------------

def dumps_topology(topo):
    """``LAYERS k``, the layer sizes top to bottom, then ``edges E`` and ``child parent`` rows."""
    lines = [f"LAYERS {len(topo.layer_sizes)}", " ".join(str(s) for s in topo.layer_sizes)]
    rows = [(c, p) for c in sorted(topo.parents) for p in topo.parents[c]]
    lines.append(f"edges {len(rows)}")
    lines += [f"{c} {p}" for c, p in rows]
    return "\n".join(lines) + "\n"


def loads_topology(text):
    from .problems.layered import LayeredTopology

    lines = [ln.split() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0][0] != "LAYERS":
        raise ValueError("not a LAYERS topology file")
    k = int(lines[0][1])
    sizes = tuple(int(v) for v in lines[1])
    if len(sizes) != k:
        raise ValueError("layer count does not match the size list")
    n_edges = int(lines[2][1])
    parents = {}
    for c, p in (map(int, ln) for ln in lines[3:3 + n_edges]):
        parents.setdefault(c, []).append(p)
    return LayeredTopology(sizes, parents)


# -- ground truth sidecar --------------------------------------------------------

def dumps_truth(arrays, meta=None):
    """Named integer/float arrays in a plain text block per array."""
    out = [GT_MAGIC]
    if meta:
        out.append("meta " + json.dumps(meta, sort_keys=True))
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        kind = "int" if np.issubdtype(a.dtype, np.integer) else "float"
        out.append(f"array {name} {kind} {' '.join(str(d) for d in a.shape) or '-'}")
        flat = a.ravel()
        fmt = (lambda v: str(int(v))) if kind == "int" else (lambda v: f"{v:.17g}")
        out.append(" ".join(fmt(v) for v in flat))
    return "\n".join(out) + "\n"


def loads_truth(text):
    lines = text.splitlines()
    if not lines or lines[0].strip() != GT_MAGIC:
        raise ValueError("not a NORGT 1 sidecar")
    arrays, meta = {}, {}
    i = 1
    while i < len(lines):
        head = lines[i].split()
        if not head:
            i += 1
            continue
        if head[0] == "meta":
            meta = json.loads(lines[i][5:])
            i += 1
            continue
        if head[0] != "array":
            raise ValueError(f"unexpected line in sidecar: {lines[i]!r}")
        name, kind = head[1], head[2]
        shape = () if head[3] == "-" else tuple(int(v) for v in head[3:])
        body = lines[i + 1].split() if i + 1 < len(lines) else []
        dtype = np.int64 if kind == "int" else np.float64
        arrays[name] = np.array(body, dtype=dtype).reshape(shape)
        i += 2
    return arrays, meta


def write_truth(path, arrays, meta=None):
    atomic_write(path, dumps_truth(arrays, meta))


def read_truth(path):
    with open(path) as fh:
        return loads_truth(fh.read())


# -- json / csv ------------------------------------------------------------------

def write_json(path, obj):
    atomic_write(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt_cell(v) for v in row])
    atomic_write(path, buf.getvalue())


def fmt_cell(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return "" if v is None else str(v)
