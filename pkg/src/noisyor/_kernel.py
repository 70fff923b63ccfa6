"""Batched max-product on lowered noisy-OR graphs.

Runs the flooding schedule of :mod:`noisyor.factor_graph` on the graph built
by :func:`noisyor.network.lower_to_factor_graph`, with every message stored as
a log-ratio ``m(1) - m(0)``. Auxiliary variables are never materialized: each
has degree two, so its outgoing messages are its incoming ones passed through.

State per edge ``e = k -> i``: pairwise-factor messages to the parent
(``pw_par``) and to the auxiliary (``pw_aux``), and the OR-factor message to
the auxiliary (``or_aux``). State per node: the OR-factor message to the node
(``or_child``). Arrays are laid out ``(edge_or_node, sample)`` so the inner
loops run over contiguous samples.

Two facts about lowered noisy-OR graphs keep the updates branch-free:
the pairwise message to an auxiliary is ``log(1-e^-t) + min(d, t)`` and so is
never ``+inf``, and the leak edge of every node always supports ``z_i = 1``.
Messages towards the leak node are computed but never read, since it is
clamped on.
"""

from concurrent.futures import ThreadPoolExecutor

import numba as nb
import numpy as np

INF = np.inf


@nb.njit(cache=True, inline="always")
def _damp(new, old, alpha, beta):
    if abs(new) < INF and abs(old) < INF:
        return alpha * new + beta * old
    return new


@nb.njit(cache=True, nogil=True)
def _run(unary, theta, keep, parent, child_ptr, par_ptr, par_edges,
         n_iters, alpha, pw_par, pw_aux, or_aux, or_child, belief):
    n_nodes, B = unary.shape
    beta = 1.0 - alpha
    v2or = np.empty((n_nodes, B))
    tot = np.empty(B)
    min1 = np.empty(B)
    min2 = np.empty(B)
    arg1 = np.empty(B, np.int64)
    q0 = np.empty(B)
    q1 = np.empty(B)
    for _ in range(n_iters):
        # variable -> factor: unary plus messages from outgoing pairwise factors
        for k in range(1, n_nodes):
            for b in range(B):
                v2or[k, b] = unary[k, b]
            for t in range(par_ptr[k], par_ptr[k + 1]):
                e = par_edges[t]
                for b in range(B):
                    v2or[k, b] += pw_par[e, b]
            for b in range(B):
                belief[k, b] = v2or[k, b] + or_child[k, b]

        for i in range(1, n_nodes):
            lo = child_ptr[i]
            hi = child_ptr[i + 1]
            # sum of positive parts and two smallest switch-on costs
            for b in range(B):
                tot[b] = 0.0
                min1[b] = INF
                min2[b] = INF
                arg1[b] = -1
            for e in range(lo, hi):
                for b in range(B):
                    d = pw_aux[e, b]
                    tot[b] += max(d, 0.0)
                    c = max(-d, 0.0)
                    m1 = min1[b]
                    min2[b] = min(min2[b], max(c, m1))
                    if c < m1:
                        arg1[b] = e
                    min1[b] = min(c, m1)
            for b in range(B):
                dc = v2or[i, b]
                q0[b] = min(0.0, -dc)
                q1[b] = min(0.0, dc)
                or_child[i, b] = _damp(tot[b] - min1[b], or_child[i, b], alpha, beta)

            for e in range(lo, hi):
                k = parent[e]
                th = theta[e]
                lk = keep[e]
                is_leak = e == lo
                for b in range(B):
                    d = pw_aux[e, b]
                    others = tot[b] - max(d, 0.0)
                    mo = min2[b] if arg1[b] == e else min1[b]
                    new_oa = q1[b] - max(q0[b] - others, q1[b] - mo)
                    oa = or_aux[e, b]
                    new_pp = max(-th, lk + oa)
                    v = INF if is_leak else belief[k, b] - pw_par[e, b]
                    new_pa = lk + min(v, th)
                    or_aux[e, b] = _damp(new_oa, oa, alpha, beta)
                    pw_par[e, b] = _damp(new_pp, pw_par[e, b], alpha, beta)
                    pw_aux[e, b] = _damp(new_pa, d, alpha, beta)

    for k in range(1, n_nodes):
        for b in range(B):
            belief[k, b] = unary[k, b] + or_child[k, b]
        for t in range(par_ptr[k], par_ptr[k + 1]):
            e = par_edges[t]
            for b in range(B):
                belief[k, b] += pw_par[e, b]
    for b in range(B):
        belief[0, b] = INF


class KernelResult:
    """Final log-ratio beliefs and messages, each shaped ``(batch, ...)``."""

    def __init__(self, belief, pw_par, pw_aux, or_aux, or_child):
        self.belief = belief
        self.pw_par = pw_par
        self.pw_aux = pw_aux
        self.or_aux = or_aux
        self.or_child = or_child

    def decode(self, unary):
        z = (self.belief > 0.0).astype(np.int8)
        z[unary == INF] = 1
        z[unary == -INF] = 0
        return z


def _solve_chunk(unary_t, static, n_iters, damping):
    N, B = unary_t.shape
    E = static[0].shape[0]
    pw_par = np.zeros((E, B))
    pw_aux = np.zeros((E, B))
    or_aux = np.zeros((E, B))
    or_child = np.zeros((N, B))
    belief = np.zeros((N, B))
    _run(unary_t, *static, n_iters, damping, pw_par, pw_aux, or_aux, or_child, belief)
    return belief, pw_par, pw_aux, or_aux, or_child


def run_noisy_or_mp(net, unary, n_iters=100, damping=0.5, workers=1):
    """Max-product on the lowered graph of ``net`` for a batch of unaries.

    ``unary`` has shape ``(B, n_nodes)`` and holds log-ratios
    ``score_at_1 - score_at_0``; ``+inf``/``-inf`` clamp a node to 1/0. The
    leak (node 0) must be clamped on. Samples are independent, so splitting
    them across ``workers`` threads does not change any result.
    """
    from .network import log1mexp

    unary = np.asarray(unary, dtype=np.float64)
    if unary.ndim != 2 or unary.shape[1] != net.n_nodes:
        raise ValueError("unary must have shape (batch, n_nodes)")
    if np.any(unary[:, 0] != INF):
        raise ValueError("the leak node must be clamped on")
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    theta = np.ascontiguousarray(net.theta)
    static = (theta, log1mexp(np.maximum(theta, 1e-300)),
              np.ascontiguousarray(net.parent), net.child_ptr, net.par_ptr, net.par_edges)
    B = unary.shape[0]
    workers = max(1, min(int(workers), B))
    bounds = np.linspace(0, B, workers + 1).astype(int)
    chunks = [np.ascontiguousarray(unary[lo:hi].T) for lo, hi in zip(bounds[:-1], bounds[1:])]

    def solve(chunk):
        return _solve_chunk(chunk, static, int(n_iters), float(damping))

    if workers == 1:
        parts = [solve(chunks[0])]
    else:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(solve, chunks))
    stacked = [np.concatenate([p[j] for p in parts], axis=1).T for j in range(5)]
    return KernelResult(*stacked)
