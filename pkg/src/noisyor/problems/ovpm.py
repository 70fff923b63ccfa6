"""Overparametrized recovery of a ground-truth two-layer noisy-OR network."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..network import NoisyOrNetwork, ParamStore
from .matching import bipartite_weights, hidden_priors, min_cost_matching

GREY = -np.log(0.1)  # failure probability 0.1
PRIOR_CUTOFF = 0.02
COST_CUTOFF = 1.0


def default_features(side=8):
    """Eight distinct binary shapes on a ``side x side`` grid."""
    s = side
    F = np.zeros((8, s, s), dtype=np.int8)
    F[0, :2, :] = 1                        # top bar
    F[1, :, -2:] = 1                       # right bar
    F[2][np.arange(s), np.arange(s)] = 1   # diagonal
    F[3][np.arange(s), s - 1 - np.arange(s)] = 1  # anti-diagonal
    F[4, 2:6, 2] = F[4, 2:6, 5] = 1        # hollow square
    F[4, 2, 2:6] = F[4, 5, 2:6] = 1
    F[5, s // 2, 1:s - 1] = 1              # plus
    F[5, 1:s - 1, s // 2] = 1
    F[6, -3:, :3] = 1                      # bottom-left block
    F[7, -1, :] = 1                        # bottom line + left column
    F[7, :, 0] = 1
    return F


@dataclass(frozen=True)
class OvpmTruth:
    V: np.ndarray          # (K*, p) continuous weights
    prior_theta: np.ndarray  # (K*,)
    noise_theta: float

    @property
    def n_features(self):
        return self.V.shape[0]


def default_truth(prior=0.25, noise=0.01, side=8):
    F = default_features(side).reshape(8, -1)
    V = F * GREY
    return OvpmTruth(V, np.full(8, -np.log1p(-prior)), float(-np.log1p(-noise)))


@dataclass(frozen=True)
class OvpmInstance:
    truth: OvpmTruth
    U: np.ndarray
    X: np.ndarray


def gen_ovpm_like(n_samples, rng, truth=None):
    """Samples ``x_j ~ 1 - exp(-theta_x - sum_k u_k V[k, j])`` with ``u_k`` from the priors."""
    truth = truth if truth is not None else default_truth()
    K = truth.n_features
    u = (rng.random((n_samples, K)) < -np.expm1(-truth.prior_theta)).astype(np.int8)
    rate = truth.noise_theta + u @ truth.V
    x = (rng.random(rate.shape) < -np.expm1(-rate)).astype(np.int8)
    return OvpmInstance(truth, u, x)


def ovpm_network(n_visible, K, weight=1.0, prior_theta=0.1, noise_theta=-np.log(0.99)):
    """``K`` hidden units fully connected to the pixels, one prior slot per unit.

    Slots: weights ``[k, j]`` at ``k * n_visible + j``, then ``K`` prior slots,
    then one shared and frozen visible noise slot.
    """
    p = n_visible
    hid = np.arange(1, K + 1)
    vis = np.arange(K + 1, K + p + 1)
    rows = [np.stack([hid, np.zeros(K, int), K * p + np.arange(K)], axis=1),
            np.stack([vis, np.zeros(p, int), np.full(p, K * p + K)], axis=1)]
    cc, pp = np.meshgrid(vis, hid)
    rows.append(np.stack([cc.ravel(), pp.ravel(), np.arange(K * p)], axis=1))
    values = np.empty(K * p + K + 1)
    values[:K * p] = weight
    values[K * p:K * p + K] = prior_theta
    values[-1] = noise_theta
    frozen = np.zeros(values.size, dtype=bool)
    frozen[-1] = True
    return NoisyOrNetwork(K, p, np.concatenate(rows), ParamStore(values, frozen))


def network_from_truth(truth, eps=1e-5):
    K, p = truth.V.shape
    net = ovpm_network(p, K, weight=np.maximum(truth.V.ravel(), eps),
                       prior_theta=truth.prior_theta, noise_theta=truth.noise_theta)
    return net


@dataclass(frozen=True)
class RecoveryReport:
    recovered: int
    full_recovery: bool
    pairs: list = field(default_factory=list)  # (learned unit, gt feature, cost)


def recovery_from_weights(V_hat, priors, V_gt):
    keep = np.flatnonzero(np.asarray(priors) >= PRIOR_CUTOFF)
    V_gt = np.asarray(V_gt, dtype=np.float64)
    if keep.size == 0:
        return RecoveryReport(0, False, [])
    cost = np.abs(V_hat[keep][:, None, :] - V_gt[None, :, :]).max(axis=2)
    rows, cols = min_cost_matching(cost)
    pairs = [(int(keep[r]), int(c), float(cost[r, c])) for r, c in zip(rows, cols)]
    n = sum(1 for _, _, c in pairs if c < COST_CUTOFF)
    return RecoveryReport(n, n == V_gt.shape[0], pairs)


def ovpm_recovery(net, truth):
    """Count ground-truth weight vectors recovered by the learned hidden units."""
    return recovery_from_weights(bipartite_weights(net), hidden_priors(net), truth.V)
