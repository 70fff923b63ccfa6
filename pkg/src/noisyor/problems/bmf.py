"""Binary matrix factorization as a two-layer noisy-OR network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..network import NoisyOrNetwork, ParamStore, elbo_terms
from ..pmp import pmp_batch
from .matching import bipartite_weights

THRESHOLD = np.log(2.0)
FROZEN_NOISE = -np.log(0.99)


def boolean_product(U, V):
    """``U V`` over the Boolean semiring (1 + 1 = 1)."""
    U = np.asarray(U, dtype=np.int64)
    V = np.asarray(V, dtype=np.int64)
    return (U @ V > 0).astype(np.int8)


def p_uv(p_x, r):
    """Entry probability of U and V that makes each entry of ``U V`` active w.p. ``p_x``."""
    return float(np.sqrt(1.0 - (1.0 - p_x) ** (1.0 / r)))


@dataclass(frozen=True)
class BmfInstance:
    n: int
    r: int
    p: int
    p_x: float
    U_train: np.ndarray
    U_test: np.ndarray
    V: np.ndarray
    X_train: np.ndarray
    X_test: np.ndarray


def gen_bmf(n, r, p, p_x, rng):
    if not 0.0 < p_x < 1.0:
        raise ValueError("p_x must lie in (0, 1)")
    if min(n, r, p) < 1 or r >= min(n, p):
        raise ValueError("need 1 <= r < min(n, p)")
    q = p_uv(p_x, r)
    V = (rng.random((r, p)) < q).astype(np.int8)
    U_train = (rng.random((n, r)) < q).astype(np.int8)
    U_test = (rng.random((n, r)) < q).astype(np.int8)
    return BmfInstance(n, r, p, p_x, U_train, U_test, V,
                       boolean_product(U_train, V), boolean_product(U_test, V))


def bmf_network(n_visible, r, v_hat=1.0, theta_u=0.1, theta_x=FROZEN_NOISE):
    """``r`` hidden causes fully connected to ``n_visible`` pixels.

    Slots: ``V_hat[i, j]`` at ``i * n_visible + j``, then the shared hidden
    prior ``theta_u``, then the shared visible noise ``theta_x`` (frozen).
    """
    m, p = r, n_visible
    hid = np.arange(1, m + 1)
    vis = np.arange(m + 1, m + p + 1)
    rows = [np.stack([hid, np.zeros(m, int), np.full(m, m * p)], axis=1),
            np.stack([vis, np.zeros(p, int), np.full(p, m * p + 1)], axis=1)]
    cc, pp = np.meshgrid(vis, hid)
    rows.append(np.stack([cc.ravel(), pp.ravel(), np.arange(m * p)], axis=1))
    values = np.empty(m * p + 2)
    values[:m * p] = v_hat
    values[m * p] = theta_u
    values[m * p + 1] = theta_x
    frozen = np.zeros(m * p + 2, dtype=bool)
    frozen[m * p + 1] = True
    return NoisyOrNetwork(m, p, np.concatenate(rows), ParamStore(values, frozen))


def thresholded_weights(net):
    return (bipartite_weights(net) > THRESHOLD).astype(np.int8)


def bmf_network_from_truth(V, prior, big=10.0, eps=1e-5):
    """Network whose thresholded weights equal ``V`` exactly."""
    V = np.asarray(V)
    r, p = V.shape
    return bmf_network(p, r, v_hat=np.where(V.ravel() == 1, big, eps),
                       theta_u=-np.log1p(-prior))


def bmf_test_re(net, X_test, n_iters=100, damping=0.5, workers=1):
    """Reconstruction error of ``X_test`` from posterior-mode causes and thresholded weights."""
    X_test = np.asarray(X_test, dtype=np.int8)
    U = pmp_batch(net, X_test, 0.0, n_iters, damping, workers=workers)
    recon = boolean_product(U, thresholded_weights(net))
    return float(np.mean(recon != X_test))


def trivial_elbo(X, r, eps=1e-5):
    """Best per-row Elbo reachable with all weights at the clip floor.

    Causes then explain nothing, so the best posterior turns them all off
    (each costs at least ``eps``) and the pixels are scored under the best
    single noise rate: the empirical activation mean.
    """
    X = np.asarray(X, dtype=np.float64)
    mu = float(np.clip(X.mean(), 1e-12, 1 - 1e-12))
    ll = X.sum(axis=1) * np.log(mu) + (X.shape[1] - X.sum(axis=1)) * np.log1p(-mu)
    return float(ll.mean()) - r * eps


def elbo_at(net, X, H):
    """Mean Elbo of rows ``X`` at hidden assignments ``H``."""
    return float(np.mean(elbo_terms(net, net.full_assignment(H, X))))
