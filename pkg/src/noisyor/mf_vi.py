"""Mean-field variational baseline and hybrid MP -> VI training.

The bound is the Jensen relaxation of the noisy-OR log-likelihood: for a node
``i`` with activation ``beta = theta_0 + sum_k theta_k z_k`` and simplex
weights ``r_k`` over its parents,

    log(1 - exp(-beta)) >= sum_k r_k log(1 - exp(-theta_0 - theta_k z_k / r_k)),

which is linear in each ``z_k`` and can be averaged under a factorized
Bernoulli posterior. Posterior variables are optimized per sample by Adam on
logits (``q = sigmoid(a)``) and per-node softmax logits (``r``).

Weights ``r`` are laid out per non-leak edge, in network edge order.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import numpy as np
import scipy.sparse as sp

from .network import dlog1mexp, elbo_terms, log1mexp, reduce_to_slots
from .pmp import pmp_batch
from .training import AdamState, adam_ascent, train


@dataclass(frozen=True)
class ViConfig:
    inner_steps: int = 50
    inner_lr: float = 0.1

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.inner_lr <= 0:
            raise ValueError("inner_lr must be positive")


class _Layout:
    """Index bookkeeping for the non-leak edges of a network (cached per structure)."""

    def __init__(self, net):
        self.n_nodes = net.n_nodes
        self.m = net.n_hidden
        self.real = np.flatnonzero(net.parent != 0)
        self.child = net.child[self.real]
        self.par = net.parent[self.real]
        self.leak = net.child_ptr[1:-1]  # leak edge of nodes 1..n-1
        counts = np.bincount(self.child, minlength=self.n_nodes)
        self.counts = counts
        self.starts = (np.concatenate([[0], np.cumsum(counts)[:-1]]))[counts > 0]
        E = self.real.size
        self.seg = sp.csr_matrix((np.ones(E), (self.child, np.arange(E))), shape=(self.n_nodes, E))
        self.pseg = sp.csr_matrix((np.ones(E), (self.par, np.arange(E))), shape=(self.n_nodes, E))

    def seg_sum(self, vals):
        """Per-child sums of per-edge values: ``(B, E) -> (B, n_nodes)``."""
        return np.asarray(self.seg @ vals.T).T

    def softmax(self, s):
        if s.shape[1] == 0:
            return s.copy()
        mx = np.maximum.reduceat(s, self.starts, axis=1)
        ex = np.exp(s - np.repeat(mx, self.counts[self.counts > 0], axis=1))
        tot = np.add.reduceat(ex, self.starts, axis=1)
        return ex / np.repeat(tot, self.counts[self.counts > 0], axis=1)


_layouts = {}


def _layout(net):
    key = (net.n_hidden, net.n_visible, net.edges.tobytes())
    lay = _layouts.get(key)
    if lay is None:
        if len(_layouts) > 8:
            _layouts.clear()
        lay = _layouts[key] = _Layout(net)
    return lay


def _mu(net, X, q):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    return np.concatenate([np.ones((X.shape[0], 1)), q, X], axis=1)


def entropy(q):
    """Bernoulli entropies summed over the last axis, with ``0 log 0 = 0``."""
    q = np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(q > 0, q * np.log(q), 0.0) - np.where(q < 1, (1 - q) * np.log1p(-q), 0.0)
    return h.sum(axis=-1)


def _pieces(net, lay, mu, r):
    theta = net.theta
    th0 = np.zeros(lay.n_nodes)
    th0[1:] = theta[lay.leak]
    the = theta[lay.real]
    f0 = np.zeros(lay.n_nodes)
    f0[1:] = log1mexp(th0[1:])
    with np.errstate(divide="ignore"):
        u = th0[lay.child] + the / r
    fu = log1mexp(u)
    live = r > 0
    a = np.where(live, r * (fu - f0[lay.child]), 0.0)
    muk = mu[:, lay.par]
    A = f0 + lay.seg_sum(a * muk)
    Bs = th0 + lay.seg_sum(the * muk)
    return th0, the, f0, u, fu, live, a, muk, A, Bs


def _elbo_vi(net, lay, mu, q, r):
    *_, A, Bs = _pieces(net, lay, mu, r)
    E = mu * A - (1 - mu) * Bs
    return E[:, 1:].sum(axis=1) + entropy(q)


def elbo_vi(net, observation, q, r):
    """Jensen-bound Elbo for factorized ``q`` over hidden nodes and edge weights ``r``.

    Returns a scalar for one observation or an array for a batch.
    """
    lay = _layout(net)
    single = np.ndim(observation) == 1
    mu = _mu(net, observation, q)
    r = np.atleast_2d(np.asarray(r, dtype=np.float64))
    out = _elbo_vi(net, lay, mu, np.atleast_2d(q), r)
    return float(out[0]) if single else out


def _grads(net, lay, mu, r, need_theta=False):
    """Gradients of the energy part w.r.t. mu (all nodes), r, and optionally per-edge theta."""
    th0, the, f0, u, fu, live, a, muk, A, Bs = _pieces(net, lay, mu, r)
    mui = mu[:, lay.child]
    g_mu = A + Bs
    g_mu[:, 0] = 0.0
    per_edge_mu = mui * a - (1 - mui) * the
    g_mu = g_mu + np.asarray(lay.pseg @ per_edge_mu.T).T
    du = dlog1mexp(u)
    with np.errstate(divide="ignore", invalid="ignore"):
        g_r = np.where(live, mui * muk * (fu - f0[lay.child] - du * the / r), 0.0)
    if not need_theta:
        return g_mu, g_r, None
    B = mu.shape[0]
    g_theta = np.zeros((B, net.edges.shape[0]))
    g_theta[:, lay.real] = mui * muk * np.where(live, du, 0.0) - (1 - mui) * muk
    df0 = np.zeros(lay.n_nodes)
    df0[1:] = dlog1mexp(th0[1:])
    inner = df0 + lay.seg_sum(np.where(live, r * muk * (du - df0[lay.child]), 0.0))
    g_leak = mu * inner - (1 - mu)
    g_theta[:, lay.leak] = g_leak[:, 1:]
    return g_mu, g_r, g_theta


def elbo_vi_grad_theta(net, observation, q, r):
    """Gradient of :func:`elbo_vi` with respect to the parameter slots (mean over a batch)."""
    lay = _layout(net)
    mu = _mu(net, observation, q)
    r = np.atleast_2d(np.asarray(r, dtype=np.float64))
    _, _, g = _grads(net, lay, mu, r, need_theta=True)
    return reduce_to_slots(net, g).mean(axis=0)


def optimize_vi(net, observations, inner_steps=50, lr=0.1):
    """Per-sample maximization of the bound over ``(q, r)``.

    Starts from ``q = 0.5`` and uniform ``r`` and returns the best iterate seen
    per sample, so the result never scores below the starting point.
    Returns ``(q, r, elbo)``, each with a leading batch axis.
    """
    if inner_steps < 1:
        raise ValueError("inner_steps must be >= 1")
    lay = _layout(net)
    X = np.atleast_2d(np.asarray(observations, dtype=np.float64))
    B, m = X.shape[0], net.n_hidden
    a = np.zeros((B, m))
    s = np.zeros((B, lay.real.size))
    adam_a = AdamState.zeros(a.shape)
    adam_s = AdamState.zeros(s.shape)
    best_q = best_r = best = None
    for it in range(inner_steps + 1):
        q = 1.0 / (1.0 + np.exp(-a))
        r = lay.softmax(s)
        mu = _mu(net, X, q)
        val = _elbo_vi(net, lay, mu, q, r)
        if best is None:
            best, best_q, best_r = val.copy(), q.copy(), r.copy()
        else:
            better = val > best
            best = np.where(better, val, best)
            best_q[better] = q[better]
            best_r[better] = r[better]
        if it == inner_steps:
            break
        g_mu, g_r, _ = _grads(net, lay, mu, r)
        g_q = g_mu[:, 1:1 + m]
        g_a = (g_q - a) * q * (1 - q)  # entropy term: dH/dq = -a
        rg = r * g_r
        g_s = rg - r * np.repeat(np.add.reduceat(rg, lay.starts, axis=1),
                                 lay.counts[lay.counts > 0], axis=1) if rg.shape[1] else rg
        a, adam_a = adam_ascent(a, g_a, adam_a, lr)
        s, adam_s = adam_ascent(s, g_s, adam_s, lr)
    return best_q, best_r, best


def vi_posterior_mode(q):
    """Round a factorized posterior to its mode, ``q >= 0.5 -> 1``."""
    return (np.asarray(q) >= 0.5).astype(np.int8)


def vi_update_parameters(net, batch, config, adam, step=0, vi=ViConfig()):
    """Variational analogue of :func:`noisyor.training.update_parameters`."""
    X = np.atleast_2d(np.asarray(batch, dtype=np.int8))
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if X.shape[1] != net.n_visible:
        raise ValueError(f"batch has {X.shape[1]} columns, network has {net.n_visible} visible nodes")
    q, r, val = optimize_vi(net, X, vi.inner_steps, vi.inner_lr)
    grad = elbo_vi_grad_theta(net, X, q, r)
    values, adam = adam_ascent(net.params.values, grad, adam, config.lr, config.adam_b1,
                               config.adam_b2, config.adam_eps, frozen=net.params.frozen)
    values = np.where(net.params.frozen, values, np.maximum(values, config.clip))
    return net.with_values(values), adam, float(np.mean(val))


def vi_train(net, data, config, vi=ViConfig(), callback=None, start_step=0):
    return train(net, data, config, step_fn=partial(vi_update_parameters, vi=vi),
                 callback=callback, start_step=start_step)


def hybrid_train(net, data, mp_steps, vi_steps, config, vi=ViConfig(), callback=None):
    """Max-product training followed by variational refinement from its parameters.

    The second phase starts a fresh optimizer state. Returns the final
    :class:`~noisyor.training.TrainResult` with both phases' history.
    """
    from dataclasses import replace

    if mp_steps < 0 or vi_steps < 0:
        raise ValueError("step counts must be >= 0")
    first = train(net, data, replace(config, n_steps=mp_steps), callback=callback)
    if vi_steps == 0:
        return first
    second = vi_train(first.net, data, replace(config, n_steps=vi_steps), vi,
                      callback=callback, start_step=mp_steps)
    second.history[:0] = first.history
    return second


@dataclass(frozen=True)
class BestElbo:
    elbo_mp: np.ndarray
    elbo_vi: np.ndarray

    @property
    def elbo_best(self):
        return np.maximum(self.elbo_mp, self.elbo_vi)


def best_elbo(net, observations, n_iters=100, damping=0.5, vi=ViConfig(), workers=1):
    """Per-row ``max(Elbo_MP at the posterior mode, Elbo_VI at optimized (q, r))``."""
    X = np.atleast_2d(np.asarray(observations, dtype=np.int8))
    H = pmp_batch(net, X, 0.0, n_iters, damping, workers=workers)
    mp = elbo_terms(net, net.full_assignment(H, X))
    _, _, v = optimize_vi(net, X, vi.inner_steps, vi.inner_lr)
    return BestElbo(mp, v)
