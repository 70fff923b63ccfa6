"""Noisy-OR Bayesian networks with shared, clippable parameters.

Node 0 is the leak node (always on). Hidden nodes are ``1..m`` and visible
nodes (the leaves) are ``m+1..m+p``. Every non-leak node has exactly one leak
edge ``0 -> i`` plus one edge per parent. Edges point at parameter slots, and
several edges may share a slot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import factor_graph as fg

CLIP_FLOOR = 1e-5
MAGIC = "NORBN 1"


def log1mexp(x):
    """``log(1 - exp(-x))`` for ``x > 0``, accurate at both ends."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.where(x < np.log(2.0), np.log(-np.expm1(-x)), np.log1p(-np.exp(-x)))


def dlog1mexp(x):
    """Derivative of :func:`log1mexp`, i.e. ``exp(-x) / (1 - exp(-x))``."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore", over="ignore"):
        return 1.0 / np.expm1(x)


@dataclass(frozen=True)
class ParamStore:
    values: np.ndarray
    frozen: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        frozen = np.array(self.frozen, dtype=bool)
        if values.shape != frozen.shape or values.ndim != 1:
            raise ValueError("values and frozen mask must be 1-D and aligned")
        values.setflags(write=False)
        frozen.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "frozen", frozen)

    def __len__(self):
        return self.values.shape[0]

    def __eq__(self, other):
        return (isinstance(other, ParamStore)
                and np.array_equal(self.values, other.values)
                and np.array_equal(self.frozen, other.frozen))


class NoisyOrNetwork:
    """Structure plus parameters of a noisy-OR BN.

    ``edges`` is an ``(E, 3)`` integer array of ``(child, parent, slot)`` rows;
    ``parent == 0`` marks a leak edge. Instances are treated as immutable;
    :meth:`with_values` returns an updated copy sharing the structure.
    """

    def __init__(self, n_hidden, n_visible, edges, params):
        self.n_hidden = int(n_hidden)
        self.n_visible = int(n_visible)
        edges = np.array(edges, dtype=np.int64).reshape(-1, 3)
        order = np.lexsort((edges[:, 1], edges[:, 0]))
        edges = edges[order]
        edges.setflags(write=False)
        self.edges = edges
        if not isinstance(params, ParamStore):
            params = ParamStore(*params)
        self.params = params
        self._validate()
        self._index()

    # -- structure ---------------------------------------------------------

    @property
    def n_nodes(self):
        return 1 + self.n_hidden + self.n_visible

    @property
    def hidden(self):
        return np.arange(1, 1 + self.n_hidden)

    @property
    def visible(self):
        return np.arange(1 + self.n_hidden, self.n_nodes)

    @property
    def child(self):
        return self.edges[:, 0]

    @property
    def parent(self):
        return self.edges[:, 1]

    @property
    def slot(self):
        return self.edges[:, 2]

    @property
    def theta(self):
        """Per-edge parameter values."""
        return self.params.values[self.slot]

    def parents_of(self, i):
        lo, hi = self.child_ptr[i], self.child_ptr[i + 1]
        return [int(k) for k in self.parent[lo:hi] if k != 0]

    def is_leak_edge(self):
        return self.parent == 0

    def _validate(self):
        n = self.n_nodes
        child, parent, slot = self.edges.T
        if np.any(child < 1) or np.any(child >= n) or np.any(parent < 0) or np.any(parent >= n):
            raise ValueError("edge references an unknown node")
        if np.any(child == parent):
            raise ValueError("self loops are not allowed")
        if np.any(slot < 0) or np.any(slot >= len(self.params)):
            raise ValueError("edge references an unknown parameter slot")
        pairs = child * n + parent
        if np.unique(pairs).size != pairs.size:
            raise ValueError("duplicate edge")
        leak_count = np.bincount(child[parent == 0], minlength=n)[1:]
        if np.any(leak_count != 1):
            raise ValueError("every node needs exactly one leak edge")
        if np.any(np.isin(parent, np.arange(1 + self.n_hidden, n))):
            raise ValueError("visible nodes cannot have children")
        if np.any(self.params.values < 0) or not np.all(np.isfinite(self.params.values)):
            raise ValueError("parameters must be finite and nonnegative")
        # Kahn's algorithm over the non-leak edges
        real = parent != 0
        indeg = np.bincount(child[real], minlength=n)
        out = [[] for _ in range(n)]
        for c, p in zip(child[real], parent[real]):
            out[p].append(c)
        stack = [i for i in range(1, n) if indeg[i] == 0]
        seen = 0
        while stack:
            i = stack.pop()
            seen += 1
            for c in out[i]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    stack.append(c)
        if seen != n - 1:
            raise ValueError("network has a directed cycle")

    def _index(self):
        n = self.n_nodes
        counts = np.bincount(self.child, minlength=n)
        self.child_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        by_parent = np.argsort(self.parent, kind="stable")
        self.par_edges = by_parent.astype(np.int64)
        pcounts = np.bincount(self.parent, minlength=n)
        self.par_ptr = np.concatenate([[0], np.cumsum(pcounts)]).astype(np.int64)
        for arr in (self.child_ptr, self.par_edges, self.par_ptr):
            arr.setflags(write=False)

    # -- parameters --------------------------------------------------------

    def with_values(self, values):
        return self.with_params(ParamStore(values, self.params.frozen))

    def with_params(self, params):
        """Copy with new parameters; the (already validated) structure is shared."""
        if not isinstance(params, ParamStore):
            params = ParamStore(*params)
        if len(params) != len(self.params):
            raise ValueError("parameter count does not match the structure")
        if np.any(params.values < 0) or not np.all(np.isfinite(params.values)):
            raise ValueError("parameters must be finite and nonnegative")
        new = object.__new__(NoisyOrNetwork)
        new.__dict__.update(self.__dict__)
        new.params = params
        return new

    def same_structure(self, other):
        return (self.n_hidden == other.n_hidden and self.n_visible == other.n_visible
                and np.array_equal(self.edges, other.edges))

    def __eq__(self, other):
        return (isinstance(other, NoisyOrNetwork) and self.same_structure(other)
                and self.params == other.params)

    def __repr__(self):
        return (f"NoisyOrNetwork(hidden={self.n_hidden}, visible={self.n_visible}, "
                f"edges={len(self.edges)}, slots={len(self.params)})")

    def full_assignment(self, hidden, visible):
        """Stack ``(z_0=1, h, x)`` for one or many samples."""
        hidden = np.atleast_2d(np.asarray(hidden, dtype=np.int8))
        visible = np.atleast_2d(np.asarray(visible, dtype=np.int8))
        ones = np.ones((hidden.shape[0], 1), dtype=np.int8)
        return np.concatenate([ones, hidden, visible], axis=1)


def build_network(n_hidden, n_visible, parents, slot_of=None, values=None, frozen=None):
    """Convenience constructor from ``parents[i] = [k, ...]`` (1-based ids).

    Without ``slot_of`` every edge gets its own slot, numbered node by node
    with each node's leak edge before its parent edges.
    """
    n = 1 + n_hidden + n_visible
    rows = []
    for i in range(1, n):
        rows.append((i, 0))
        for k in sorted(parents.get(i, ())):
            rows.append((i, int(k)))
    if slot_of is None:
        slots = list(range(len(rows)))
        n_slots = len(rows)
    else:
        slots = [slot_of(c, p) for c, p in rows]
        n_slots = max(slots) + 1
    edges = [(c, p, s) for (c, p), s in zip(rows, slots)]
    if values is None:
        values = np.full(n_slots, 1.0)
    if frozen is None:
        frozen = np.zeros(n_slots, dtype=bool)
    return NoisyOrNetwork(n_hidden, n_visible, edges, ParamStore(values, frozen))


def conditional_prob_zero(net, i, parent_values):
    """``p(z_i = 0 | parents)`` for node ``i``.

    ``parent_values`` is either a mapping ``{parent: value}`` or a sequence
    aligned with ``net.parents_of(i)``.
    """
    if not 1 <= i < net.n_nodes:
        raise KeyError(f"unknown node {i}")
    lo, hi = net.child_ptr[i], net.child_ptr[i + 1]
    parents = net.parent[lo:hi]
    theta = net.theta[lo:hi]
    real = [int(k) for k in parents if k != 0]
    if isinstance(parent_values, dict):
        vals = {int(k): int(v) for k, v in parent_values.items()}
    else:
        vals = dict(zip(real, (int(v) for v in parent_values)))
    missing = set(real) - set(vals)
    if missing:
        raise ValueError(f"missing parent values for {sorted(missing)}")
    z = np.array([1 if k == 0 else vals[int(k)] for k in parents])
    return float(np.exp(-np.dot(theta, z)))


def node_activation(net, z):
    """``beta_i = theta_leak + sum_k theta_{k->i} z_k`` for every node, batched.

    ``z`` has shape ``(B, n_nodes)`` with ``z[:, 0] == 1``.
    """
    z = np.atleast_2d(z)
    contrib = net.theta[None, :] * z[:, net.parent]
    beta = np.zeros((z.shape[0], net.n_nodes))
    np.add.at(beta, (slice(None), net.child), contrib)
    return beta


def _as_batch(net, observation, hidden_assignment):
    x = np.atleast_2d(np.asarray(observation, dtype=np.int8))
    h = np.atleast_2d(np.asarray(hidden_assignment, dtype=np.int8))
    if x.shape[1] != net.n_visible or h.shape[1] != net.n_hidden:
        raise ValueError("assignment sizes do not match the network")
    if h.shape[0] != x.shape[0]:
        raise ValueError("hidden and visible batches differ in length")
    return net.full_assignment(h, x)


def elbo_terms(net, z):
    """Per-sample Elbo under a Dirac posterior, for full assignments ``z``."""
    beta = node_activation(net, z)[:, 1:]
    on = z[:, 1:].astype(bool)
    terms = np.where(on, log1mexp(np.where(on, beta, 1.0)), -beta)
    return terms.sum(axis=1)


def elbo_mp(net, observation, hidden_assignment):
    """Joint log-likelihood ``log p(h, x)``; batched when inputs are 2-D."""
    z = _as_batch(net, observation, hidden_assignment)
    values = elbo_terms(net, z)
    return float(values[0]) if np.ndim(observation) == 1 else values


def edge_gradients(net, z):
    """Per-sample, per-edge derivative of the Elbo, shape ``(B, E)``."""
    beta = node_activation(net, z)
    zc = z[:, net.child].astype(np.float64)
    zp = z[:, net.parent].astype(np.float64)
    bc = beta[:, net.child]
    fprime = dlog1mexp(np.where(zc > 0, bc, 1.0))
    return zc * zp * fprime + (zc - 1.0) * zp


def reduce_to_slots(net, per_edge):
    """Sum per-edge quantities into their slots (last axis); frozen slots -> 0."""
    per_edge = np.atleast_2d(per_edge)
    out = np.zeros((per_edge.shape[0], len(net.params)))
    np.add.at(out, (slice(None), net.slot), per_edge)
    out[:, net.params.frozen] = 0.0
    return out


def elbo_grad(net, observation, hidden_assignment):
    """Closed-form gradient of :func:`elbo_mp` with respect to the slots."""
    z = _as_batch(net, observation, hidden_assignment)
    grads = reduce_to_slots(net, edge_gradients(net, z))
    return grads[0] if np.ndim(observation) == 1 else grads


# -- lowering to a factor graph ----------------------------------------------

@dataclass(frozen=True)
class LoweredGraph:
    graph: fg.FactorGraph
    n_nodes: int
    aux_of_edge: np.ndarray  # variable id of the auxiliary copy of each edge


def clamp_unaries(net, observation=None):
    """Unaries of the original variables: leak forced on, visible clamped."""
    un = np.zeros((net.n_nodes, 2))
    un[0] = (fg.NEG_INF, 0.0)
    if observation is not None:
        x = np.asarray(observation, dtype=np.int8)
        if x.shape != (net.n_visible,):
            raise ValueError("observation size does not match the visible layer")
        vis = net.visible
        un[vis[x == 0], 1] = fg.NEG_INF
        un[vis[x == 1], 0] = fg.NEG_INF
    return un


def lower_to_factor_graph(net, observation=None, unaries=None):
    """Equivalent factor graph made of pairwise factors and noise-free ORs.

    Variables ``0..n_nodes-1`` are the network nodes; one auxiliary variable
    follows per edge. Each edge ``k -> i`` gets a pairwise factor from
    ``z_k`` to its auxiliary copy, and each node gets one OR factor from the
    auxiliaries of its incoming edges (leak included) to ``z_i``.
    """
    n = net.n_nodes
    E = len(net.edges)
    if unaries is None:
        unaries = clamp_unaries(net, observation)
    all_un = np.zeros((n + E, 2))
    all_un[:n] = unaries
    aux = np.arange(n, n + E)
    theta = net.theta
    keep = log1mexp(np.maximum(theta, 1e-300))
    factors = []
    for e in range(E):
        table = np.array([[0.0, fg.NEG_INF], [-theta[e], keep[e]]])
        factors.append(fg.PairwiseFactor(int(net.parent[e]), int(aux[e]), table))
    for i in range(1, n):
        lo, hi = net.child_ptr[i], net.child_ptr[i + 1]
        factors.append(fg.OrFactor(tuple(aux[lo:hi]), i))
    return LoweredGraph(fg.FactorGraph(all_un, factors), n, aux)


# -- serialization -------------------------------------------------------------

def dumps(net):
    lines = [MAGIC, f"nodes {net.n_hidden} {net.n_visible}", f"edges {len(net.edges)}"]
    lines += [f"{c} {p} {s}" for c, p, s in net.edges]
    lines.append(f"slots {len(net.params)}")
    lines += [f"{v:.17g} {int(f)}" for v, f in zip(net.params.values, net.params.frozen)]
    return "\n".join(lines) + "\n"


def loads(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != MAGIC:
        raise ValueError("not a NORBN 1 model file")
    it = iter(lines[1:])
    tag, m, p = next(it).split()
    if tag != "nodes":
        raise ValueError("expected 'nodes' line")
    tag, n_edges = next(it).split()
    if tag != "edges":
        raise ValueError("expected 'edges' line")
    edges = [tuple(int(t) for t in next(it).split()) for _ in range(int(n_edges))]
    tag, n_slots = next(it).split()
    if tag != "slots":
        raise ValueError("expected 'slots' line")
    values, frozen = [], []
    for _ in range(int(n_slots)):
        v, f = next(it).split()
        values.append(float(v))
        frozen.append(bool(int(f)))
    return NoisyOrNetwork(int(m), int(p), edges, ParamStore(values, frozen))
