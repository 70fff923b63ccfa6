"""Command-line front end: generate, build-graph, train, eval, sample."""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import asdict

import numpy as np

from . import io
from .mf_vi import ViConfig, best_elbo, hybrid_train, vi_train
from .pmp import pmp_batch
from .problems.bd import BdLayout, bd_test_re, features_iou, gen_bd
from .problems.bmf import bmf_network, bmf_test_re, gen_bmf
from .problems.layered import LayeredGraphSpec, ZeroActivityError, build_layered_graph
from .problems.ovpm import OvpmTruth, default_truth, gen_ovpm_like, ovpm_network, ovpm_recovery
from .training import InitScheme, TrainConfig, init_params, train


class UsageError(Exception):
    """Bad flags or flag combinations (exit code 2)."""


class DataError(Exception):
    """Unreadable, malformed or inconsistent inputs (exit code 1)."""


# -- config files ----------------------------------------------------------------

def read_config(path):
    """``key=value`` lines; ``#`` starts a comment. Keys use flag names without dashes."""
    out = {}
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (t.strip() for t in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def expand_config(parser, argv):
    """Splice config values in as flags right after the subcommand.

    Explicit flags come later on the command line, and argparse keeps the
    last occurrence, so they win. Required flags may come from the file.
    """
    path = _config_path(argv)
    if path is None:
        return argv
    head, sub = parser.subcommand_parser(argv)
    if sub is None:
        return argv
    known = {a.dest: a for a in sub._actions}
    argv_cfg = []
    for key, value in read_config(path).items():
        action = known.get(key)
        if action is None or key in ("config", "help"):
            raise UsageError(f"unknown config key {key!r}")
        if not action.option_strings:
            raise UsageError(f"config key {key!r} is positional")
        if action.nargs == 0:
            if value.lower() in ("1", "true", "yes", "on"):
                argv_cfg.append(action.option_strings[0])
            elif isinstance(action, argparse.BooleanOptionalAction):
                argv_cfg.append(action.option_strings[-1])
            continue
        argv_cfg += [action.option_strings[-1], *value.split()]
    return argv[:head] + argv_cfg + argv[head:]


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")

    def subcommand_parser(self, argv):
        """``(depth, parser)`` of the innermost subcommand named in ``argv``."""
        sub, depth = self, 0
        while sub._subparsers is not None and depth < len(argv):
            choices = sub._subparsers._group_actions[0].choices
            if argv[depth] not in choices:
                return depth, None
            sub = choices[argv[depth]]
            depth += 1
        return depth, sub


# -- argument definitions --------------------------------------------------------

def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.add_argument("--config", help="file of key=value lines; explicit flags win")


def _inference(p):
    p.add_argument("--n-iters", type=int, default=100)
    p.add_argument("--damping", type=float, default=0.5)


def build_parser():
    parser = Parser(prog="noisyor", description=__doc__)
    cmds = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    gen = cmds.add_parser("generate", help="write a synthetic dataset")
    kinds = gen.add_subparsers(dest="kind", required=True, parser_class=Parser)
    g = kinds.add_parser("bmf")
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--r", type=int, default=20)
    g.add_argument("--p", type=int, help="visible width (default: n)")
    g.add_argument("--px", type=float, default=0.25)
    g = kinds.add_parser("bd")
    g.add_argument("--n-images", type=int, default=100)
    g.add_argument("--act", type=int, nargs=2, default=[10, 10], metavar=("H", "W"))
    g.add_argument("--p-act", type=float, default=0.01)
    g.add_argument("--train-frac", type=float, default=0.8)
    g = kinds.add_parser("ovpm")
    g.add_argument("--samples", type=int, default=9000)
    g.add_argument("--test-samples", type=int, default=1000)
    g.add_argument("--prior", type=float, default=0.25)
    g.add_argument("--noise", type=float, default=0.01)
    for g in kinds.choices.values():
        g.add_argument("--out", required=True, help="output directory")
        _common(g)

    bg = cmds.add_parser("build-graph", help="layered topology from co-occurrences")
    bg.add_argument("--data", required=True)
    bg.add_argument("--layers", type=int, default=3)
    bg.add_argument("--ratio", type=int, default=3)
    bg.add_argument("--parents", type=int, default=5)
    bg.add_argument("--out", required=True)
    _common(bg)

    tr = cmds.add_parser("train", help="learn parameters")
    methods = tr.add_subparsers(dest="kind", required=True, parser_class=Parser)
    for name in ("mp", "vi", "hybrid"):
        t = methods.add_parser(name)
        t.add_argument("--data", required=True, help="training NBIN file")
        t.add_argument("--out", required=True, help="output directory")
        src = t.add_mutually_exclusive_group(required=True)
        src.add_argument("--problem", choices=["bmf", "bd", "ovpm"])
        src.add_argument("--graph", help="topology file from build-graph")
        t.add_argument("--r", type=int, default=20, help="bmf: hidden causes")
        t.add_argument("--hidden", type=int, default=16, help="ovpm: hidden units")
        t.add_argument("--n-feat", type=int, default=5, help="bd: learned features")
        t.add_argument("--feat", type=int, nargs=2, default=[6, 6], metavar=("H", "W"))
        t.add_argument("--img", type=int, nargs=2, metavar=("H", "W"),
                       help="bd: image size (default: from the dataset manifest)")
        t.add_argument("--steps", type=int, default=1000)
        t.add_argument("--lr", type=float, default=1e-3)
        t.add_argument("--batch-size", type=int, default=20)
        t.add_argument("--temperature", type=float, default=1.0)
        t.add_argument("--clip", type=float, default=1e-5)
        t.add_argument("--init-scheme", type=int, default=3, choices=[1, 2, 3, 4])
        t.add_argument("--symmetry-noise", type=float,
                       help="sd of init noise (default 0.1 for problems, 0 for graphs)")
        t.add_argument("--freeze-noise", action=argparse.BooleanOptionalAction, default=None,
                       help="freeze visible noise at 0.01 (default on for problems)")
        t.add_argument("--inner-steps", type=int, default=50)
        t.add_argument("--inner-lr", type=float, default=0.1)
        t.add_argument("--timing", action="store_true", help="log wall-clock seconds per update")
        _inference(t)
        _common(t)
        if name == "hybrid":
            t.add_argument("--mp-steps", type=int, default=1000)
            t.add_argument("--vi-steps", type=int, default=500)

    ev = cmds.add_parser("eval", help="metrics of a trained model on test data")
    ev.add_argument("--run", required=True, help="directory written by train")
    ev.add_argument("--data", required=True, help="test NBIN file")
    ev.add_argument("--gt", help="ground-truth sidecar (needed for iou / recovery)")
    ev.add_argument("--metrics", help="comma list from elbo,re,iou,recovery")
    ev.add_argument("--inner-steps", type=int, default=50)
    ev.add_argument("--inner-lr", type=float, default=0.1)
    ev.add_argument("--out", required=True, help="output directory")
    _inference(ev)
    _common(ev)

    sa = cmds.add_parser("sample", help="posterior modes or samples per input row")
    sa.add_argument("--run", required=True)
    sa.add_argument("--data", required=True)
    sa.add_argument("--temperature", type=float, default=0.0)
    sa.add_argument("--count", type=int, default=1)
    sa.add_argument("--out", required=True, help="output NBIN file")
    _inference(sa)
    _common(sa)
    return parser


# -- helpers ---------------------------------------------------------------------

def _read_nbin(path):
    try:
        return io.read_nbin(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc


def _manifest_near(path):
    cand = os.path.join(os.path.dirname(os.path.abspath(path)), "manifest.json")
    return io.read_json(cand) if os.path.exists(cand) else {}


def _check_workers(args):
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")


def _manifest(args, files):
    flags = {k: v for k, v in sorted(vars(args).items())
             if k not in ("workers", "config", "out")}
    return {"command": args.command, "kind": getattr(args, "kind", None),
            "seed": args.seed, "flags": flags, "files": sorted(files)}


# -- generate --------------------------------------------------------------------

def cmd_generate(args):
    rng = np.random.default_rng(args.seed)
    out = args.out
    meta = {"problem": args.kind}
    if args.kind == "bmf":
        p = args.p if args.p is not None else args.n
        if not 0.0 < args.px < 1.0:
            raise UsageError("--px must lie in (0, 1)")
        if min(args.n, args.r, p) < 1 or args.r >= min(args.n, p):
            raise UsageError("need 1 <= r < min(n, p)")
        inst = gen_bmf(args.n, args.r, p, args.px, rng)
        train_x, test_x = inst.X_train, inst.X_test
        truth = {"U_train": inst.U_train, "U_test": inst.U_test, "V": inst.V}
        meta.update(n=args.n, r=args.r, p=p, px=args.px)
    elif args.kind == "bd":
        if args.n_images < 2 or not 0.0 < args.train_frac < 1.0:
            raise UsageError("need --n-images >= 2 and --train-frac in (0, 1)")
        if min(args.act) < 1 or not 0.0 <= args.p_act <= 1.0:
            raise UsageError("invalid activation grid or --p-act")
        inst = gen_bd(rng, args.n_images, args.act[0], args.act[1], p_act=args.p_act)
        X = inst.X.reshape(args.n_images, -1)
        perm = rng.permutation(args.n_images)
        n_train = int(round(args.train_frac * args.n_images))
        n_train = min(max(n_train, 1), args.n_images - 1)
        tr, te = np.sort(perm[:n_train]), np.sort(perm[n_train:])
        train_x, test_x = X[tr], X[te]
        truth = {"W": inst.W, "S": inst.S, "train_rows": tr, "test_rows": te}
        meta.update(img_h=int(inst.X.shape[1]), img_w=int(inst.X.shape[2]),
                    n_feat=int(inst.W.shape[0]), feat_h=int(inst.W.shape[1]), feat_w=int(inst.W.shape[2]))
    else:
        if args.samples < 1 or args.test_samples < 0:
            raise UsageError("need --samples >= 1 and --test-samples >= 0")
        if not (0.0 < args.prior < 1.0 and 0.0 < args.noise < 1.0):
            raise UsageError("--prior and --noise must lie in (0, 1)")
        gt = default_truth(args.prior, args.noise)
        inst = gen_ovpm_like(args.samples + args.test_samples, rng, gt)
        train_x, test_x = inst.X[:args.samples], inst.X[args.samples:]
        truth = {"V": gt.V, "prior_theta": gt.prior_theta,
                 "noise_theta": np.array([gt.noise_theta])}
        meta.update(n_visible=int(gt.V.shape[1]), n_features=int(gt.V.shape[0]))
    try:
        io.write_nbin(os.path.join(out, "X_train.nbin"), train_x)
        io.write_nbin(os.path.join(out, "X_test.nbin"), test_x)
        io.write_truth(os.path.join(out, "gt.txt"), truth, meta)
        man = _manifest(args, ["X_train.nbin", "X_test.nbin", "gt.txt"])
        man["meta"] = meta
        io.write_json(os.path.join(out, "manifest.json"), man)
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from exc
    return 0


# -- build-graph -----------------------------------------------------------------

def cmd_build_graph(args):
    X = _read_nbin(args.data)
    try:
        spec = LayeredGraphSpec(args.layers, args.ratio, args.parents)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    try:
        topo = build_layered_graph(X, spec)
    except ZeroActivityError as exc:
        raise DataError(f"columns with zero activity (drop them first): {exc.columns}") from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    try:
        io.atomic_write(args.out, io.dumps_topology(topo))
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc}") from exc
    return 0


# -- train -----------------------------------------------------------------------

def problem_from_args(args, n_visible):
    """Problem description stored with a run, enough to rebuild its network."""
    if args.graph:
        try:
            with open(args.graph) as fh:
                text = fh.read()
        except OSError as exc:
            raise DataError(f"cannot read graph {args.graph}: {exc}") from exc
        return {"kind": "graph", "topology": text}
    if args.problem == "bmf":
        return {"kind": "bmf", "r": args.r, "n_visible": n_visible}
    if args.problem == "ovpm":
        return {"kind": "ovpm", "hidden": args.hidden, "n_visible": n_visible}
    img = args.img
    if img is None:
        meta = _manifest_near(args.data).get("meta", {})
        if "img_h" not in meta:
            raise UsageError("bd needs --img H W (no dataset manifest found)")
        img = [meta["img_h"], meta["img_w"]]
    return {"kind": "bd", "n_feat": args.n_feat, "feat": list(args.feat), "img": list(img)}


def network_for(problem):
    kind = problem["kind"]
    if kind == "graph":
        return io.loads_topology(problem["topology"]).network()
    if kind == "bmf":
        return bmf_network(problem["n_visible"], problem["r"])
    if kind == "ovpm":
        return ovpm_network(problem["n_visible"], problem["hidden"])
    return bd_layout(problem).network()


def bd_layout(problem):
    (fh, fw), (h, w) = problem["feat"], problem["img"]
    return BdLayout(problem["n_feat"], fh, fw, h, w)


def cmd_train(args):
    _check_workers(args)
    X = _read_nbin(args.data)
    if X.shape[0] == 0:
        raise DataError("training set is empty")
    try:
        config = TrainConfig(lr=args.lr, batch_size=args.batch_size, n_steps=args.steps,
                             temperature=args.temperature, clip=args.clip, n_iters=args.n_iters,
                             damping=args.damping, seed=args.seed, workers=args.workers)
        vi = ViConfig(args.inner_steps, args.inner_lr)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if not 0.0 < args.damping <= 1.0 or args.n_iters < 1:
        raise UsageError("need --damping in (0, 1] and --n-iters >= 1")
    problem = problem_from_args(args, X.shape[1])
    try:
        net = network_for(problem)
    except ValueError as exc:
        raise DataError(f"invalid topology: {exc}") from exc
    if net.n_visible != X.shape[1]:
        raise DataError(f"dataset has {X.shape[1]} columns but the model has {net.n_visible} visible nodes")
    is_problem = problem["kind"] != "graph"
    sd = args.symmetry_noise if args.symmetry_noise is not None else (0.1 if is_problem else 0.0)
    freeze = args.freeze_noise if args.freeze_noise is not None else is_problem
    try:
        scheme = InitScheme.preset(args.init_scheme, symmetry_noise_sd=sd, freeze_noise=freeze)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    net = init_params(net, scheme, np.random.default_rng([args.seed, 1]))
    if args.kind == "mp":
        result = train(net, X, config)
    elif args.kind == "vi":
        result = vi_train(net, X, config, vi)
    else:
        if args.mp_steps < 0 or args.vi_steps < 0:
            raise UsageError("--mp-steps and --vi-steps must be >= 0")
        result = hybrid_train(net, X, args.mp_steps, args.vi_steps, config, vi)
    out = args.out
    rows = [(s, e, t if args.timing else None) for s, e, t in result.history]
    run = {"method": args.kind, "problem": problem, "seed": args.seed,
           "train_config": {k: v for k, v in asdict(config).items() if k != "workers"},
           "init": asdict(scheme), "vi": asdict(vi), "data": os.path.basename(args.data)}
    if args.kind == "hybrid":
        run.update(mp_steps=args.mp_steps, vi_steps=args.vi_steps)
    try:
        io.write_network(os.path.join(out, "model.norbn"), result.net)
        io.atomic_write(os.path.join(out, "optimizer.adam"), result.adam.dumps())
        io.write_csv(os.path.join(out, "history.csv"), ["step", "elbo", "update_seconds"], rows)
        io.write_json(os.path.join(out, "run.json"), run)
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from exc
    return 0


# -- eval / sample -----------------------------------------------------------------

def load_run(path):
    try:
        run = io.read_json(os.path.join(path, "run.json"))
        net = io.read_network(os.path.join(path, "model.norbn"))
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load run from {path}: {exc}") from exc
    return run, net


GT_METRICS = {"iou": "bd", "recovery": "ovpm"}


def cmd_eval(args):
    _check_workers(args)
    run, net = load_run(args.run)
    X = _read_nbin(args.data)
    if X.shape[1] != net.n_visible:
        raise DataError(f"test data has {X.shape[1]} columns but the model has {net.n_visible} visible nodes")
    if X.shape[0] == 0:
        raise DataError("test set is empty")
    kind = run["problem"]["kind"]
    if args.metrics:
        wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
        bad = [m for m in wanted if m not in ("elbo", "re", "iou", "recovery")]
        if bad:
            raise UsageError(f"unknown metrics {bad}")
    else:
        wanted = ["elbo"]
        if kind in ("bmf", "bd"):
            wanted.append("re")
        if args.gt and kind in GT_METRICS.values():
            wanted.append("iou" if kind == "bd" else "recovery")
    for m in wanted:
        if m == "re" and kind not in ("bmf", "bd"):
            raise UsageError("re is defined for bmf and bd runs only")
        if m in GT_METRICS and kind != GT_METRICS[m]:
            raise UsageError(f"{m} is defined for {GT_METRICS[m]} runs only")
    truth = None
    if any(m in GT_METRICS for m in wanted):
        if not args.gt:
            raise DataError("a ground-truth sidecar (--gt) is required for iou/recovery")
        try:
            truth, _ = io.read_truth(args.gt)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read ground truth {args.gt}: {exc}") from exc
    try:
        vi = ViConfig(args.inner_steps, args.inner_lr)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if not 0.0 < args.damping <= 1.0 or args.n_iters < 1:
        raise UsageError("need --damping in (0, 1] and --n-iters >= 1")
    metrics = []
    if "elbo" in wanted:
        be = best_elbo(net, X, args.n_iters, args.damping, vi, workers=args.workers)
        rows = [(i, a, b, c) for i, (a, b, c) in enumerate(zip(be.elbo_mp, be.elbo_vi, be.elbo_best))]
        metrics += [("elbo_mp", float(np.mean(be.elbo_mp))), ("elbo_vi", float(np.mean(be.elbo_vi))),
                    ("elbo_best", float(np.mean(be.elbo_best)))]
        io.write_csv(os.path.join(args.out, "elbo.csv"), ["row", "elbo_mp", "elbo_vi", "elbo_best"], rows)
    if "re" in wanted:
        if kind == "bmf":
            re = bmf_test_re(net, X, args.n_iters, args.damping, args.workers)
        else:
            re = bd_test_re(net, bd_layout(run["problem"]), X, args.n_iters, args.damping, args.workers)
        metrics.append(("test_re", re))
    if "iou" in wanted:
        if "W" not in truth:
            raise DataError("ground truth has no features W")
        lay = bd_layout(run["problem"])
        metrics.append(("features_iou", features_iou(lay.thresholded(net), truth["W"])))
    if "recovery" in wanted:
        if "V" not in truth or "prior_theta" not in truth:
            raise DataError("ground truth has no weights V / priors")
        gt = OvpmTruth(truth["V"], truth["prior_theta"], float(truth["noise_theta"][0]))
        if gt.V.shape[1] != net.n_visible:
            raise DataError("ground-truth width does not match the model")
        rep = ovpm_recovery(net, gt)
        metrics += [("recovered", rep.recovered), ("full_recovery", int(rep.full_recovery))]
    io.write_csv(os.path.join(args.out, "metrics.csv"), ["metric", "value"], metrics)
    return 0


def cmd_sample(args):
    _check_workers(args)
    if args.temperature < 0:
        raise UsageError("--temperature must be >= 0")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if not 0.0 < args.damping <= 1.0 or args.n_iters < 1:
        raise UsageError("need --damping in (0, 1] and --n-iters >= 1")
    _, net = load_run(args.run)
    X = _read_nbin(args.data)
    if X.shape[1] != net.n_visible:
        raise DataError(f"data has {X.shape[1]} columns but the model has {net.n_visible} visible nodes")
    rows = np.repeat(X, args.count, axis=0)
    H = pmp_batch(net, rows, args.temperature, args.n_iters, args.damping,
                  seed=args.seed, workers=args.workers)
    try:
        io.write_nbin(args.out, H)
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc}") from exc
    return 0


COMMANDS = {"generate": cmd_generate, "build-graph": cmd_build_graph, "train": cmd_train,
            "eval": cmd_eval, "sample": cmd_sample}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(expand_config(parser, argv))
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
