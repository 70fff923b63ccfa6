"""Multi-layer graph construction from co-occurrence statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..network import build_network


@dataclass(frozen=True)
class LayeredGraphSpec:
    n_layers: int = 3
    r_children_to_parents: int = 3
    n_parents_by_node: int = 5

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.r_children_to_parents < 1 or self.n_parents_by_node < 1:
            raise ValueError("ratios must be >= 1")


class ZeroActivityError(ValueError):
    def __init__(self, columns):
        self.columns = [int(c) for c in columns]
        super().__init__(f"columns never active: {self.columns}")


def cooccurrence_distance(X):
    """``D = exp(-O / (C C^T))`` from empirical (co-)activation frequencies."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("X must be a non-empty 2-D binary matrix")
    C = X.mean(axis=0)
    dead = np.flatnonzero(C == 0)
    if dead.size:
        raise ZeroActivityError(dead)
    O = (X.T @ X) / X.shape[0]
    R = O / np.outer(C, C)
    return np.exp(-R)


def agglomerative_average_linkage(D, k):
    """Average-linkage clustering of ``D`` into ``k`` clusters.

    Clusters are merged greedily by smallest mean pairwise distance; among
    equal distances the pair with the lowest ``(i, j)`` wins, where a cluster
    is identified by its smallest member. Labels are ``0..k-1`` numbered by
    smallest member. The diagonal of ``D`` is ignored.
    """
    D = np.asarray(D, dtype=np.float64)
    n = D.shape[0]
    if D.ndim != 2 or D.shape[1] != n:
        raise ValueError("D must be square")
    if np.any(np.isnan(D)) or np.any(D < 0) or not np.array_equal(D, D.T):
        raise ValueError("D must be symmetric, nonnegative and free of NaN")
    if not 1 <= k <= n:
        raise ValueError("k must satisfy 1 <= k <= n")
    dist = D.copy()
    np.fill_diagonal(dist, np.inf)
    size = np.ones(n)
    alive = np.ones(n, dtype=bool)
    owner = np.arange(n)
    iu = np.triu_indices(n, 1)
    for _ in range(n - k):
        upper = dist[iu]
        live = alive[iu[0]] & alive[iu[1]]
        best = upper[live].min()
        pos = int(np.flatnonzero(live & (upper == best))[0])  # lowest (i, j) on ties
        i, j = int(iu[0][pos]), int(iu[1][pos])
        # Lance-Williams update for average linkage; cluster j folds into i
        merged = (size[i] * dist[i] + size[j] * dist[j]) / (size[i] + size[j])
        dist[i] = merged
        dist[:, i] = merged
        dist[i, i] = np.inf
        dist[j] = np.inf
        dist[:, j] = np.inf
        size[i] += size[j]
        alive[j] = False
        owner[owner == j] = i
    roots = np.flatnonzero(alive)
    relabel = np.empty(n, dtype=np.int64)
    relabel[roots] = np.arange(roots.size)
    return relabel[owner]


@dataclass(frozen=True)
class LayeredTopology:
    """Layer sizes from the top hidden layer down to the visible layer, and parent lists."""
    layer_sizes: tuple
    parents: dict

    @property
    def n_hidden(self):
        return int(sum(self.layer_sizes[:-1]))

    @property
    def n_visible(self):
        return int(self.layer_sizes[-1])

    def network(self, value=1.0):
        n_slots = sum(1 + len(self.parents.get(i, ())) for i in range(1, 1 + self.n_hidden + self.n_visible))
        return build_network(self.n_hidden, self.n_visible, self.parents,
                             values=np.full(n_slots, value))


def build_layered_graph(X, spec=LayeredGraphSpec()):
    """Layered noisy-OR topology over the columns of ``X``.

    Each layer above the visible one has ``floor(d / ratio)`` nodes, one per
    cluster of the layer below; every node links to the ``n_parents_by_node``
    clusters it is closest to on average. The top hidden layer links only to
    the leak.
    """
    D = cooccurrence_distance(X)
    sizes = [D.shape[0]]
    links = []  # per step: list of parent-index lists for the lower layer
    for _ in range(spec.n_layers - 1):
        d = D.shape[0]
        n_up = d // spec.r_children_to_parents
        if n_up < 1:
            raise ValueError(f"layer of size {d} is too small for ratio {spec.r_children_to_parents}")
        labels = agglomerative_average_linkage(D, n_up)
        groups = [np.flatnonzero(labels == m) for m in range(n_up)]
        to_cluster = np.stack([D[:, g].mean(axis=1) for g in groups], axis=1)
        n_par = min(spec.n_parents_by_node, n_up)
        chosen = np.argsort(to_cluster, axis=1, kind="stable")[:, :n_par]
        links.append([sorted(int(c) for c in row) for row in chosen])
        children = [np.flatnonzero((chosen == m).any(axis=1)) for m in range(n_up)]
        # clusters nobody links to sit at infinite distance from everything
        up = np.full((n_up, n_up), np.inf)
        for a in range(n_up):
            for b in range(a, n_up):
                if children[a].size and children[b].size:
                    up[a, b] = up[b, a] = D[np.ix_(children[a], children[b])].mean()
        D = up
        sizes.append(n_up)
    sizes = sizes[::-1]
    links = links[::-1]
    starts = np.concatenate([[1], 1 + np.cumsum(sizes)])
    parents = {}
    for depth, rows in enumerate(links):
        upper, lower = starts[depth], starts[depth + 1]
        for k, row in enumerate(rows):
            parents[int(lower + k)] = [int(upper + m) for m in row]
    return LayeredTopology(tuple(int(s) for s in sizes), parents)
