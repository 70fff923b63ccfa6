"""Stochastic Elbo ascent with max-product posteriors (mini-batch + Adam + clip)."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .network import CLIP_FLOOR, ParamStore, edge_gradients, elbo_terms, reduce_to_slots
from .pmp import pmp_batch

NOISE_FROZEN_PROB = 0.01
PROJECT_DELTA = 1e-3


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 20
    n_steps: int = 1000
    temperature: float = 1.0
    clip: float = CLIP_FLOOR
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    n_iters: int = 100
    damping: float = 0.5
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.clip <= 0:
            raise ValueError("clip floor must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n_slots):
        return cls(np.zeros(n_slots), np.zeros(n_slots), 0)

    def dumps(self):
        lines = ["ADAM 1", f"step {self.t}", f"slots {self.m.size}"]
        lines += [f"{a:.17g} {b:.17g}" for a, b in zip(self.m, self.v)]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text):
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].strip() != "ADAM 1":
            raise ValueError("not an ADAM 1 optimizer file")
        t = int(lines[1].split()[1])
        n = int(lines[2].split()[1])
        mv = np.array([[float(x) for x in ln.split()] for ln in lines[3:3 + n]]).reshape(n, 2)
        return cls(mv[:, 0].copy(), mv[:, 1].copy(), t)


def adam_ascent(values, grad, state, lr, b1=0.9, b2=0.999, eps=1e-8, frozen=None):
    """One Adam step *up* the gradient. Frozen slots are left bit-identical."""
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    mhat = m / (1.0 - b1 ** t)
    vhat = v / (1.0 - b2 ** t)
    new = values + lr * mhat / (np.sqrt(vhat) + eps)
    if frozen is not None:
        new = np.where(frozen, values, new)
    return new, AdamState(m, v, t)


# -- initialization ------------------------------------------------------------

@dataclass(frozen=True)
class InitScheme:
    failure_prob: float = 0.9
    prior_prob: float = 0.1
    noise_prob: float = 0.1
    symmetry_noise_sd: float = 0.0
    freeze_noise: bool = False

    def __post_init__(self):
        for name in ("failure_prob", "prior_prob", "noise_prob"):
            p = getattr(self, name)
            if not 0.0 < p < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.symmetry_noise_sd < 0:
            raise ValueError("symmetry_noise_sd must be >= 0")

    @classmethod
    def preset(cls, number, **kw):
        """The four failure/prior(/noise) combinations, numbered 1-4."""
        table = {1: (0.5, 0.5), 2: (0.5, 0.1), 3: (0.9, 0.1), 4: (0.9, 0.5)}
        if number not in table:
            raise ValueError("init scheme must be 1, 2, 3 or 4")
        fail, prior = table[number]
        return cls(failure_prob=fail, prior_prob=prior, noise_prob=prior, **kw)


def slot_roles(net):
    """Classify each slot as 'failure', 'prior' or 'noise' (and flag leaf leaks).

    A leak slot is a prior when its node has no parents, a noise otherwise.
    Slots shared by edges of different roles are rejected.
    """
    n_parents = np.bincount(net.child[net.parent != 0], minlength=net.n_nodes)
    roles = np.full(len(net.params), "", dtype=object)
    leaf = np.zeros(len(net.params), dtype=bool)
    is_vis = np.zeros(net.n_nodes, dtype=bool)
    is_vis[net.visible] = True
    for (c, p, s) in net.edges:
        role = "failure" if p != 0 else ("noise" if n_parents[c] else "prior")
        if roles[s] and roles[s] != role:
            raise ValueError(f"slot {s} is shared across roles {roles[s]} and {role}")
        roles[s] = role
        if p == 0 and is_vis[c]:
            leaf[s] = True
    return roles, leaf


def init_params(net, scheme, rng):
    """Fresh parameters for ``net`` per ``scheme``.

    Failure probability ``f`` maps to ``theta = -log f``; prior and noise
    probabilities ``q`` map to ``theta = -log(1 - q)``. Optional Gaussian noise
    is added to the failure and prior probabilities (then projected into
    ``[1e-3, 1 - 1e-3]``). With ``freeze_noise``, leaf leak slots are fixed at
    noise probability 0.01 and excluded from updates.
    """
    roles, leaf = slot_roles(net)
    n = len(net.params)
    probs = np.empty(n)
    probs[roles == "failure"] = scheme.failure_prob
    probs[roles == "prior"] = scheme.prior_prob
    probs[roles == "noise"] = scheme.noise_prob
    if scheme.symmetry_noise_sd > 0:
        jitter = rng.normal(0.0, scheme.symmetry_noise_sd, size=n)
        noisy = (roles == "failure") | (roles == "prior")
        probs = np.where(noisy, probs + jitter, probs)
        probs = np.where(noisy, np.clip(probs, PROJECT_DELTA, 1.0 - PROJECT_DELTA), probs)
    theta = np.where(roles == "failure", -np.log(probs), -np.log1p(-probs))
    frozen = np.zeros(n, dtype=bool)
    if scheme.freeze_noise:
        fixed = leaf & (roles == "noise")
        theta[fixed] = -np.log1p(-NOISE_FROZEN_PROB)
        frozen[fixed] = True
    theta = np.maximum(theta, CLIP_FLOOR)
    return net.with_params(ParamStore(theta, frozen))


# -- Algorithm 1 ----------------------------------------------------------------

def batch_gradient(net, X, H):
    """Mean Elbo and mean slot gradient over a batch of (x, h) pairs.

    The reduction runs in a fixed order, so results do not depend on how the
    posterior queries were scheduled.
    """
    z = net.full_assignment(H, X)
    elbos = elbo_terms(net, z)
    grads = reduce_to_slots(net, edge_gradients(net, z))
    return float(np.mean(elbos)), grads.mean(axis=0)


def update_parameters(net, batch, config, adam, step=0):
    """One parameter update; returns ``(net, adam, mean batch Elbo)``.

    The reported Elbo is evaluated at the pre-update parameters.
    """
    X = np.atleast_2d(np.asarray(batch, dtype=np.int8))
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if X.shape[1] != net.n_visible:
        raise ValueError(f"batch has {X.shape[1]} columns, network has {net.n_visible} visible nodes")
    H = pmp_batch(net, X, config.temperature, config.n_iters, config.damping,
                  seed=config.seed, key=(step,), workers=config.workers)
    elbo, grad = batch_gradient(net, X, H)
    values, adam = adam_ascent(net.params.values, grad, adam, config.lr, config.adam_b1,
                               config.adam_b2, config.adam_eps, frozen=net.params.frozen)
    values = np.where(net.params.frozen, values, np.maximum(values, config.clip))
    return net.with_values(values), adam, elbo


@dataclass
class TrainResult:
    net: object
    adam: AdamState
    history: list = field(default_factory=list)  # (step, elbo, seconds)


def batches(n_rows, batch_size, rng):
    """Endless stream of index batches, reshuffled each epoch; partial batches kept."""
    while True:
        order = rng.permutation(n_rows)
        for lo in range(0, n_rows, batch_size):
            yield order[lo:lo + batch_size]


def train(net, data, config, adam=None, step_fn=None, callback=None, start_step=0):
    """Run ``config.n_steps`` updates over shuffled mini-batches of ``data``.

    ``step_fn`` defaults to :func:`update_parameters`; the hybrid trainer
    swaps in the variational update. ``callback(step, net, elbo)`` runs after
    every step.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.int8))
    if data.shape[0] == 0:
        raise ValueError("empty dataset")
    step_fn = step_fn or update_parameters
    adam = adam or AdamState.zeros(len(net.params))
    rng = np.random.default_rng([config.seed, start_step])
    stream = batches(data.shape[0], config.batch_size, rng)
    history = []
    for step in range(start_step, start_step + config.n_steps):
        idx = next(stream)
        t0 = time.perf_counter()
        net, adam, elbo = step_fn(net, data[idx], config, adam, step)
        history.append((step, elbo, time.perf_counter() - t0))
        if callback is not None:
            callback(step, net, elbo)
    return TrainResult(net, adam, history)


def with_steps(config, n_steps):
    return replace(config, n_steps=n_steps)
