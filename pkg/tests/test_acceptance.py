"""Acceptance checks, one test per criterion.

A summary line per criterion is printed at the end of the pytest run. The
long training experiments (criteria 6-8) are marked ``slow`` and only run with
``--run-slow``.
"""

import csv
import filecmp
import math
import os
import time

import numpy as np
import pytest

from noisyor import factor_graph as fg
from noisyor.cli import main
from noisyor.io import read_nbin
from noisyor.mf_vi import elbo_vi, elbo_vi_grad_theta
from noisyor.network import build_network, elbo_grad, elbo_mp
from noisyor.pmp import PmpQueryConfig, pmp_batch, pmp_query
from noisyor.problems import LayeredGraphSpec, build_layered_graph, trivial_elbo
from oracles import all_assignments, exact_posterior, forward_sample, log_joint, random_polytree_net


def detail(record_property, text):
    record_property("detail", text)


# -- 1 ---------------------------------------------------------------------------

def enumerate_or_messages(n_parents, incoming):
    """Vectorized listing of all 2^n parent configurations (child = OR)."""
    cfg = all_assignments(n_parents).astype(int)
    full = np.concatenate([cfg, cfg.any(axis=1, keepdims=True).astype(int)], axis=1)
    cols = np.arange(n_parents + 1)
    picked = incoming[cols, full]  # (configs, vars)
    total = picked.sum(axis=1, keepdims=True)
    others = total - picked
    out = np.full((n_parents + 1, 2), -np.inf)
    for v in range(n_parents + 1):
        for c in (0, 1):
            sel = full[:, v] == c
            out[v, c] = others[sel, v].max()
    return out - out.max(axis=1, keepdims=True)


@pytest.mark.criterion(1)
def test_kernel_equivalence(record_property):
    rng = np.random.default_rng(2024)
    cases = []
    for _ in range(1000):
        n = int(rng.integers(1, 13))
        cases.append((n, fg.normalize(rng.normal(0, 3, size=(n + 1, 2)))))
    t0 = time.perf_counter()
    linear = [fg.factor_to_var_or(fg.OrFactor(tuple(range(n)), n), inc) for n, inc in cases]
    elapsed = time.perf_counter() - t0
    worst = max(np.max(np.abs(a - enumerate_or_messages(n, inc))) for a, (n, inc) in zip(linear, cases))
    detail(record_property, f"max abs diff {worst:.2e} over 1000 factors, linear updates {elapsed:.2f}s")
    assert worst <= 1e-9
    assert elapsed < 10.0


# -- 2 ---------------------------------------------------------------------------

@pytest.mark.criterion(2)
def test_tree_exactness(record_property):
    rng = np.random.default_rng(7)
    ok = n = 0
    t0 = time.perf_counter()
    while n < 200:
        net = random_polytree_net(rng, int(rng.integers(2, 16)))
        if net is None:
            continue
        x = forward_sample(net, rng)[1 + net.n_hidden:]
        full = lambda h: np.concatenate([[1], h, x])
        best = max(log_joint(net, full(h)) for h in all_assignments(net.n_hidden))
        h = pmp_query(net, x, PmpQueryConfig(0.0)).hidden
        ok += log_joint(net, full(h)) >= best - 1e-9
        n += 1
    elapsed = time.perf_counter() - t0
    detail(record_property, f"optimum of log p(h,x) attained in {ok}/{n} trees ({elapsed:.1f}s)")
    assert ok / n >= 0.99
    assert elapsed < 60.0


# -- 3 ---------------------------------------------------------------------------

def rel_error(g, fd, scale, step=1e-5, target=1e-4):
    """Max relative error, with the denominator floored where a central
    difference cannot resolve ``target`` accuracy: round-off alone contributes
    about ``eps * |f| / step``."""
    floor = np.finfo(float).eps * max(abs(scale), 1.0) / step / target
    return float(np.max(np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), floor)))


def central_difference(f, values, frozen, step=1e-5):
    out = np.zeros(values.size)
    for s in np.flatnonzero(~frozen):
        up, dn = values.copy(), values.copy()
        up[s] += step
        dn[s] -= step
        out[s] = (f(up) - f(dn)) / (2 * step)
    return out


def random_bipartite_net(rng, theta=(0.05, 3.0)):
    m, p = int(rng.integers(1, 5)), int(rng.integers(1, 6))
    parents = {m + 1 + j: [k for k in range(1, m + 1) if rng.random() < 0.6] for j in range(p)}
    net = build_network(m, p, parents)
    return net.with_values(rng.uniform(*theta, size=len(net.params)))


def simplex_r(rng, net):
    real = np.flatnonzero(net.parent != 0)
    r = rng.exponential(size=real.size)
    tot = np.zeros(net.n_nodes)
    np.add.at(tot, net.child[real], r)
    return r / tot[net.child[real]]


@pytest.mark.criterion(3)
def test_gradient_fidelity(record_property):
    rng = np.random.default_rng(3)
    worst_mp = worst_vi = 0.0
    for _ in range(100):
        net = random_bipartite_net(rng)
        x = rng.integers(0, 2, size=net.n_visible)
        h = rng.integers(0, 2, size=net.n_hidden)
        f = lambda v: elbo_mp(net.with_values(v), x, h)
        fd = central_difference(f, net.params.values, net.params.frozen)
        worst_mp = max(worst_mp, rel_error(elbo_grad(net, x, h), fd, f(net.params.values)))
        q = rng.uniform(0.02, 0.98, size=net.n_hidden)
        r = simplex_r(rng, net)
        f = lambda v: elbo_vi(net.with_values(v), x, q, r)
        fd = central_difference(f, net.params.values, net.params.frozen)
        worst_vi = max(worst_vi, rel_error(elbo_vi_grad_theta(net, x, q, r), fd, f(net.params.values)))
    detail(record_property, f"max rel err MP {worst_mp:.1e}, VI {worst_vi:.1e}")
    assert worst_mp <= 1e-4 and worst_vi <= 1e-4


# -- 4 ---------------------------------------------------------------------------

@pytest.mark.criterion(4)
def test_elbo_dominance(record_property):
    rng = np.random.default_rng(4)
    worst = -np.inf
    for _ in range(1000):
        net = random_bipartite_net(rng)
        if rng.random() < 0.5 and net.n_hidden > 1:  # add hidden-to-hidden structure
            parents = {i: net.parents_of(i) for i in range(1, net.n_nodes)}
            parents[2] = [1]
            net = build_network(net.n_hidden, net.n_visible, parents)
            net = net.with_values(rng.uniform(0.05, 3.0, size=len(net.params)))
        x = rng.integers(0, 2, size=net.n_visible)
        h = rng.integers(0, 2, size=net.n_hidden)
        worst = max(worst, elbo_vi(net, x, h, simplex_r(rng, net)) - elbo_mp(net, x, h))
    detail(record_property, f"max(elbo_vi - elbo_mp) = {worst:.2e} over 1000 nets")
    assert worst <= 1e-9


# -- 5 ---------------------------------------------------------------------------

def sampling_net():
    # hidden 1, 2; visible 3 <- {1, 2}, visible 4 <- {2}
    probs = [("prior", 0.3), ("prior", 0.2), ("noise", 0.05), ("fail", 0.1), ("fail", 0.3),
             ("noise", 0.05), ("fail", 0.2)]
    values = [-math.log(1 - p) if kind != "fail" else -math.log(p) for kind, p in probs]
    return build_network(2, 2, {3: [1, 2], 4: [2]}, values=values)


@pytest.mark.criterion(5)
def test_sampling_quality(record_property):
    net = sampling_net()
    x = np.array([1, 0])
    H, exact, _ = exact_posterior(net, x)
    draws = pmp_batch(net, np.tile(x, (20000, 1)), temperature=1.0, seed=5)
    codes = draws[:, 0] * 2 + draws[:, 1]
    emp = np.bincount(codes, minlength=4) / len(codes)
    order = H[:, 0] * 2 + H[:, 1]
    tv = 0.5 * np.abs(emp[order] - exact).sum()
    detail(record_property, f"TV = {tv:.3f} (exact {np.round(exact, 3).tolist()}, PMP {np.round(emp[order], 3).tolist()})")
    assert tv <= 0.15


# -- 6, 7, 8: long experiments through the command line ----------------------------

def cli(*args):
    code = main([str(a) for a in args])
    assert code == 0, f"command failed: {args}"


def metrics(path):
    with open(path) as fh:
        return {row["metric"]: float(row["value"]) for row in csv.DictReader(fh)}


def bmf_run(tmp, seed, steps):
    d, r, e, et = (os.path.join(tmp, f"{k}{seed}_{steps}") for k in "drea")
    cli("generate", "bmf", "--n", 100, "--r", 20, "--px", 0.25, "--seed", seed, "--out", d, "--workers", 1)
    t0 = time.perf_counter()
    cli("train", "mp", "--problem", "bmf", "--r", 20, "--data", f"{d}/X_train.nbin", "--out", r,
        "--steps", steps, "--lr", 1e-3, "--batch-size", 20, "--temperature", 1, "--seed", seed, "--workers", 1)
    minutes = (time.perf_counter() - t0) / 60
    cli("eval", "--run", r, "--data", f"{d}/X_test.nbin", "--metrics", "re", "--out", e, "--workers", 1)
    cli("eval", "--run", r, "--data", f"{d}/X_train.nbin", "--metrics", "elbo", "--out", et, "--workers", 1)
    X = read_nbin(f"{d}/X_train.nbin")
    return metrics(f"{e}/metrics.csv")["test_re"], metrics(f"{et}/metrics.csv")["elbo_best"], trivial_elbo(X, 20), minutes


@pytest.mark.slow
@pytest.mark.criterion(6)
def test_bmf_desk_scale(record_property, tmp_path):
    res = [bmf_run(tmp_path, s, 40000) for s in range(3)]
    smoke_re, _, _, smoke_min = bmf_run(tmp_path, 0, 10000)
    re = [r[0] for r in res]
    better = all(r[1] > r[2] for r in res)
    detail(record_property, f"test RE {np.round(re, 4).tolist()} median {np.median(re):.4f}; best-Elbo "
           f"{[round(r[1], 2) for r in res]} vs trivial {[round(r[2], 2) for r in res]}; "
           f"smoke RE {smoke_re:.4f} in {smoke_min:.1f} min")
    assert np.median(re) <= 0.08
    assert better
    assert smoke_re <= 0.15 and smoke_min <= 30


def bd_run(tmp, seed, steps):
    d, r, e = (os.path.join(tmp, f"bd{k}{seed}_{steps}") for k in "dre")
    cli("generate", "bd", "--seed", seed, "--out", d, "--workers", 1)
    cli("train", "mp", "--problem", "bd", "--data", f"{d}/X_train.nbin", "--out", r, "--steps", steps,
        "--lr", 0.01, "--batch-size", 80, "--temperature", 1, "--seed", seed, "--workers", 1)
    cli("eval", "--run", r, "--data", f"{d}/X_test.nbin", "--gt", f"{d}/gt.txt", "--metrics", "re,iou",
        "--out", e, "--workers", 1)
    return metrics(f"{e}/metrics.csv"), r, d


@pytest.mark.slow
@pytest.mark.criterion(7)
def test_bd_desk_scale(record_property, tmp_path):
    from noisyor.io import read_network, read_truth
    from noisyor.problems import BdLayout, matched_ious

    res = [bd_run(tmp_path, s, 3000)[0] for s in range(3)]
    iou = [m["features_iou"] for m in res]
    re = [m["test_re"] for m in res]
    short, run_dir, data_dir = bd_run(tmp_path, 0, 500)
    truth, _ = read_truth(f"{data_dir}/gt.txt")
    lay = BdLayout(5, 6, 6, 14, 14)
    per_feature = matched_ious(lay.thresholded(read_network(f"{run_dir}/model.norbn")), truth["W"])
    good = int(np.sum(np.asarray(per_feature) >= 0.8))
    detail(record_property, f"IOU {np.round(iou, 3).tolist()} median {np.median(iou):.3f}; test RE "
           f"{np.round(re, 4).tolist()} median {np.median(re):.4f}; 500 steps: {good}/4 features at IOU >= 0.8")
    assert np.median(iou) >= 0.85
    assert np.median(re) <= 0.08
    assert good >= 2


@pytest.mark.slow
@pytest.mark.criterion(8)
def test_overparametrization_trend(record_property, tmp_path):
    found = {8: [], 16: []}
    for seed in range(5):
        d = os.path.join(tmp_path, f"ov{seed}")
        cli("generate", "ovpm", "--samples", 9000, "--seed", seed, "--out", d, "--workers", 1)
        for K in (8, 16):
            r, e = os.path.join(d, f"run{K}"), os.path.join(d, f"eval{K}")
            cli("train", "mp", "--problem", "ovpm", "--hidden", K, "--data", f"{d}/X_train.nbin", "--out", r,
                "--steps", 45000, "--lr", 1e-3, "--batch-size", 20, "--temperature", 1, "--seed", seed,
                "--workers", 1)
            cli("eval", "--run", r, "--data", f"{d}/X_test.nbin", "--gt", f"{d}/gt.txt",
                "--metrics", "recovery", "--out", e, "--workers", 1)
            found[K].append(metrics(f"{e}/metrics.csv")["recovered"])
    m8, m16 = np.median(found[8]), np.median(found[16])
    detail(record_property, f"recovered K=8 {found[8]} (median {m8}), K=16 {found[16]} (median {m16})")
    assert m16 >= m8
    assert m16 >= 6


# -- 9 ---------------------------------------------------------------------------

@pytest.mark.criterion(9)
def test_graph_builder_layer_sizes(record_property):
    """Results that need external datasets are out of scope; the layered builder
    is checked on a 100-column input instead."""
    rng = np.random.default_rng(9)
    X = (rng.random((500, 100)) < 0.2).astype(np.int8)
    topo = build_layered_graph(X, LayeredGraphSpec(3, 3, 5))
    net = topo.network()
    detail(record_property, f"layer sizes {list(topo.layer_sizes)} (top to visible); "
           "external-data results not reproduced by design")
    assert topo.layer_sizes == (11, 33, 100)
    assert net.n_hidden == 44 and net.n_visible == 100


# -- 10 ----------------------------------------------------------------------------

def run_pipeline(root, workers):
    w = ("--workers", workers)
    cli("generate", "bmf", "--n", 40, "--r", 4, "--px", 0.5, "--seed", 1, "--out", f"{root}/bmf", *w)
    cli("generate", "bd", "--n-images", 10, "--act", 6, 6, "--p-act", 0.05, "--seed", 1, "--out", f"{root}/bd", *w)
    cli("generate", "ovpm", "--samples", 1000, "--test-samples", 20, "--seed", 1, "--out", f"{root}/ovpm", *w)
    cli("build-graph", "--data", f"{root}/ovpm/X_train.nbin", "--out", f"{root}/graph.txt", *w)
    cli("train", "mp", "--problem", "bmf", "--r", 4, "--data", f"{root}/bmf/X_train.nbin", "--out",
        f"{root}/mp", "--steps", 30, "--batch-size", 10, "--seed", 2, *w)
    cli("train", "hybrid", "--problem", "bmf", "--r", 4, "--data", f"{root}/bmf/X_train.nbin", "--out",
        f"{root}/hy", "--mp-steps", 10, "--vi-steps", 5, "--inner-steps", 5, "--batch-size", 10, "--seed", 2, *w)
    cli("train", "vi", "--graph", f"{root}/graph.txt", "--data", f"{root}/ovpm/X_train.nbin", "--out",
        f"{root}/gv", "--steps", 5, "--inner-steps", 5, "--batch-size", 10, *w)
    cli("train", "mp", "--problem", "bd", "--n-feat", 2, "--feat", 5, 5, "--data", f"{root}/bd/X_train.nbin",
        "--out", f"{root}/bdrun", "--steps", 5, "--batch-size", 8, "--lr", 0.01, *w)
    cli("train", "mp", "--problem", "ovpm", "--hidden", 8, "--data", f"{root}/ovpm/X_train.nbin",
        "--out", f"{root}/ovrun", "--steps", 20, *w)
    cli("eval", "--run", f"{root}/mp", "--data", f"{root}/bmf/X_test.nbin", "--out", f"{root}/ev_mp", *w)
    cli("eval", "--run", f"{root}/bdrun", "--data", f"{root}/bd/X_test.nbin", "--gt", f"{root}/bd/gt.txt",
        "--out", f"{root}/ev_bd", *w)
    cli("eval", "--run", f"{root}/ovrun", "--data", f"{root}/ovpm/X_test.nbin", "--gt", f"{root}/ovpm/gt.txt",
        "--out", f"{root}/ev_ov", *w)
    cli("sample", "--run", f"{root}/mp", "--data", f"{root}/bmf/X_test.nbin", "--temperature", 1,
        "--count", 3, "--out", f"{root}/samples.nbin", *w)


def tree_files(root):
    out = []
    for dirpath, _, files in os.walk(root):
        out += [os.path.relpath(os.path.join(dirpath, f), root) for f in files]
    return sorted(out)


@pytest.mark.criterion(10)
def test_determinism(record_property, tmp_path):
    roots = {k: tmp_path / k for k in ("w1a", "w1b", "w8")}
    run_pipeline(roots["w1a"], 1)
    run_pipeline(roots["w1b"], 1)
    run_pipeline(roots["w8"], 8)
    files = tree_files(roots["w1a"])
    assert files == tree_files(roots["w1b"]) == tree_files(roots["w8"])
    diff = [f for f in files for other in ("w1b", "w8")
            if not filecmp.cmp(roots["w1a"] / f, roots[other] / f, shallow=False)]
    detail(record_property, f"{len(files)} output files compared across 3 runs (workers 1, 1, 8); "
           f"{len(diff)} differ")
    assert not diff
