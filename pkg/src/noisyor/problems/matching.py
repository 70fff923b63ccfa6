"""Minimum-cost bipartite matching and helpers shared by the metrics."""

import numpy as np
from scipy.optimize import linear_sum_assignment


def min_cost_matching(cost):
    """Optimal assignment for a rectangular cost matrix.

    Returns ``(rows, cols)`` index arrays covering ``min(cost.shape)`` pairs,
    sorted by row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if cost.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    rows, cols = linear_sum_assignment(cost)
    return rows.astype(np.int64), cols.astype(np.int64)


def bipartite_weights(net):
    """Hidden-to-visible parameter matrix ``(n_hidden, n_visible)`` of a two-layer net.

    Entry ``[k, j]`` is the parameter on edge ``hidden k -> visible j`` and 0
    where no edge exists.
    """
    W = np.zeros((net.n_hidden, net.n_visible))
    theta = net.theta
    m = net.n_hidden
    for e in np.flatnonzero(net.parent != 0):
        c, p = net.child[e], net.parent[e]
        if not (1 <= p <= m and c > m):
            raise ValueError("network is not hidden -> visible bipartite")
        W[p - 1, c - 1 - m] = theta[e]
    return W


def hidden_priors(net):
    """Prior activation probability ``1 - exp(-theta_leak)`` of each hidden node."""
    theta = net.theta
    leak = net.child_ptr[1:1 + net.n_hidden]
    return -np.expm1(-theta[leak])
