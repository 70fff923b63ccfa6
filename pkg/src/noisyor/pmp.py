"""Perturb-and-max-product posterior queries on noisy-OR networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import factor_graph as fg
from ._kernel import run_noisy_or_mp
from .network import clamp_unaries, lower_to_factor_graph


@dataclass(frozen=True)
class PmpQueryConfig:
    temperature: float = 0.0
    n_iters: int = 100
    damping: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.temperature >= 0.0:
            raise ValueError("temperature must be >= 0")
        if self.n_iters < 1:
            raise ValueError("n_iters must be >= 1")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")


@dataclass(frozen=True)
class PosteriorAssignment:
    hidden: np.ndarray
    visible: np.ndarray

    @property
    def full(self):
        return np.concatenate([[1], self.hidden, self.visible]).astype(np.int8)


def sample_rng(seed, *key):
    """Independent generator for ``(seed, *key)``, e.g. ``(seed, step, index)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, key)])))


def gumbel(rng, size=None):
    """Standard Gumbel draws ``-log(-log(u))`` by inverse CDF on the open unit interval."""
    if size is None:
        u = rng.random()
        while u == 0.0:
            u = rng.random()
        return -np.log(-np.log(u))
    u = rng.random(size)
    bad = u == 0.0
    while np.any(bad):
        u[bad] = rng.random(int(np.count_nonzero(bad)))
        bad = u == 0.0
    return -np.log(-np.log(u))


def perturbed_unaries(net, observations, temperature, rngs):
    """Log-ratio unaries for a batch: leak on, visibles clamped, hidden perturbed.

    Every finite unary entry of a non-clamped model variable gets ``T * g`` with
    an independent Gumbel ``g``; the log-ratio therefore moves by
    ``T * (g_1 - g_0)``.
    """
    X = np.atleast_2d(np.asarray(observations, dtype=np.int8))
    if X.shape[1] != net.n_visible:
        raise ValueError("observation width does not match the visible layer")
    B = X.shape[0]
    unary = np.zeros((B, net.n_nodes))
    unary[:, 0] = np.inf
    unary[:, 1 + net.n_hidden:] = np.where(X == 1, np.inf, -np.inf)
    if temperature > 0.0:
        for b in range(B):
            g = gumbel(rngs[b], (net.n_hidden, 2))
            unary[b, 1:1 + net.n_hidden] = temperature * (g[:, 1] - g[:, 0])
    return unary


def pmp_batch(net, observations, temperature=0.0, n_iters=100, damping=0.5,
              seed=0, key=(), workers=1):
    """Hidden assignments for a batch of observations, shape ``(B, n_hidden)``.

    Sample ``b`` draws its perturbation from ``sample_rng(seed, *key, b)`` so
    results do not depend on how the batch is split across workers.
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    X = np.atleast_2d(np.asarray(observations, dtype=np.int8))
    rngs = None
    if temperature > 0.0:
        rngs = [sample_rng(seed, *key, b) for b in range(X.shape[0])]
    unary = perturbed_unaries(net, X, temperature, rngs)
    result = run_noisy_or_mp(net, unary, n_iters=n_iters, damping=damping, workers=workers)
    z = result.decode(unary)
    return z[:, 1:1 + net.n_hidden]


def pmp_query(net, observation, config=PmpQueryConfig(), engine="kernel"):
    """Single posterior query: mode at ``T=0``, approximate sample at ``T=1``.

    ``engine="generic"`` runs the reference factor-graph engine on the
    explicitly lowered graph instead of the batched kernel.
    """
    x = np.asarray(observation, dtype=np.int8)
    if engine == "kernel":
        h = pmp_batch(net, x[None, :], config.temperature, config.n_iters,
                      config.damping, config.seed)[0]
    elif engine == "generic":
        un = clamp_unaries(net, x)
        if config.temperature > 0.0:
            g = gumbel(sample_rng(config.seed, 0), (net.n_hidden, 2))
            un[1:1 + net.n_hidden] += config.temperature * g
        lowered = lower_to_factor_graph(net, unaries=un)
        state = fg.run_max_product(lowered.graph, config.n_iters, config.damping)
        h = fg.decode(lowered.graph, state)[1:1 + net.n_hidden]
    else:
        raise ValueError(f"unknown engine {engine!r}")
    return PosteriorAssignment(hidden=h.astype(np.int8), visible=x.copy())


def posterior_mode(net, observation, n_iters=100, damping=0.5):
    """Approximate ``argmax_h p(h | x)``: visibles clamped, no perturbation."""
    return pmp_query(net, observation, PmpQueryConfig(0.0, n_iters, damping))
