import math

import numpy as np
import pytest

from noisyor.network import build_network, lower_to_factor_graph
from noisyor.pmp import (
    PmpQueryConfig, gumbel, perturbed_unaries, pmp_batch, pmp_query,
    posterior_mode, sample_rng,
)
from oracles import (
    all_assignments, exact_posterior, forward_sample, log_joint_max_aux,
    random_polytree_net,
)

EULER_GAMMA = 0.5772156649015329


def test_gumbel_closed_form():
    class Fixed:
        def random(self, size=None):
            return 1 / math.e
    assert gumbel(Fixed()) == pytest.approx(0.0, abs=1e-15)


def test_gumbel_mean():
    g = gumbel(sample_rng(0), 1_000_000)
    assert abs(g.mean() - EULER_GAMMA) < 0.01


def test_gumbel_rejects_zero_draw():
    class Seq:
        def __init__(self):
            self.vals = [0.0, 0.5]

        def random(self, size=None):
            return self.vals.pop(0)
    assert gumbel(Seq()) == pytest.approx(-math.log(-math.log(0.5)))


def test_sample_rng_is_reproducible_and_keyed():
    a = sample_rng(3, 1, 2).random(5)
    assert np.array_equal(a, sample_rng(3, 1, 2).random(5))
    assert not np.array_equal(a, sample_rng(3, 2, 1).random(5))


def test_perturbation_only_touches_hidden():
    net = build_network(2, 2, {3: [1, 2], 4: [2]})
    X = np.array([[1, 0], [0, 1]])
    un = perturbed_unaries(net, X, 1.0, [sample_rng(0, b) for b in range(2)])
    assert np.all(un[:, 0] == np.inf)
    assert np.array_equal(un[:, 3:], [[np.inf, -np.inf], [-np.inf, np.inf]])
    assert np.all(np.isfinite(un[:, 1:3])) and np.any(un[:, 1:3] != 0)
    assert np.all(perturbed_unaries(net, X, 0.0, None)[:, 1:3] == 0)


def chain_net(prior=1e-3, noise=1e-9, strength=30.0):
    # hidden 1 -> visible 2
    return build_network(1, 1, {2: [1]}, values=[prior, noise, strength])


def test_deterministic_chain_cause():
    assert posterior_mode(chain_net(), [1]).hidden.tolist() == [1]
    assert posterior_mode(chain_net(), [0]).hidden.tolist() == [0]


def explaining_away_net():
    # causes 1 (likely) and 2 (rare) both trigger visible 3 with certainty
    return build_network(2, 1, {3: [1, 2]}, values=[-math.log(1 - 0.4), -math.log(1 - 0.01), 1e-6, 20.0, 20.0])


def test_explaining_away():
    net = explaining_away_net()
    H, probs, _ = exact_posterior(net, np.array([1]))
    assert H[np.argmax(probs)].tolist() == [1, 0]
    assert posterior_mode(net, [1]).hidden.tolist() == [1, 0]


def test_all_zero_observation_with_tiny_priors():
    net = build_network(3, 4, {4: [1, 2], 5: [2, 3], 6: [1], 7: [3]})
    net = net.with_values(np.where(net.is_leak_edge(), 1e-3, 1.0))  # one slot per edge, in edge order
    assert posterior_mode(net, np.zeros(4)).hidden.tolist() == [0, 0, 0]


def test_mode_idempotent_and_seed_free():
    rng = np.random.default_rng(0)
    net = random_polytree_net(rng, 9)
    x = forward_sample(net, rng)[1 + net.n_hidden:]
    a = posterior_mode(net, x).hidden
    assert np.array_equal(a, posterior_mode(net, x).hidden)
    for seed in range(3):
        assert np.array_equal(a, pmp_query(net, x, PmpQueryConfig(0.0, seed=seed)).hidden)


def test_clamp_invariant_any_temperature():
    rng = np.random.default_rng(1)
    for t in (0.0, 0.5, 1.0, 5.0):
        for _ in range(10):
            net = random_polytree_net(rng, int(rng.integers(3, 10)))
            if net is None:
                continue
            x = rng.integers(0, 2, size=net.n_visible)
            out = pmp_query(net, x, PmpQueryConfig(t, seed=int(rng.integers(1 << 30))))
            assert np.array_equal(out.visible, x)
            assert out.full[0] == 1
            assert out.hidden.shape == (net.n_hidden,)


def test_tree_mode_maximizes_lowered_joint():
    rng = np.random.default_rng(2)
    for _ in range(100):
        net = random_polytree_net(rng, int(rng.integers(3, 13)))
        if net is None:
            continue
        x = forward_sample(net, rng)[1 + net.n_hidden:]
        full = lambda hh: np.concatenate([[1], hh, x])
        best = max(log_joint_max_aux(net, full(hh)) for hh in all_assignments(net.n_hidden))
        h = posterior_mode(net, x).hidden
        assert log_joint_max_aux(net, full(h)) >= best - 1e-9


def test_kernel_matches_generic_engine():
    rng = np.random.default_rng(3)
    for _ in range(20):
        net = random_polytree_net(rng, int(rng.integers(3, 12)))
        if net is None:
            continue
        x = rng.integers(0, 2, size=net.n_visible)
        for damping in (0.5, 1.0):
            cfg = PmpQueryConfig(0.0, n_iters=40, damping=damping)
            a = pmp_query(net, x, cfg, engine="kernel").hidden
            b = pmp_query(net, x, cfg, engine="generic").hidden
            assert np.array_equal(a, b)


def test_kernel_matches_generic_on_loopy_nets():
    rng = np.random.default_rng(4)
    for _ in range(10):
        m, p = 4, 6
        parents = {i: sorted(rng.choice(np.arange(1, m + 1), size=2, replace=False).tolist()) for i in range(m + 1, m + p + 1)}
        net = build_network(m, p, parents)
        net = net.with_values(rng.uniform(0.1, 2.0, size=len(net.params)))
        x = rng.integers(0, 2, size=p)
        cfg = PmpQueryConfig(0.0, n_iters=25, damping=0.5)
        assert np.array_equal(pmp_query(net, x, cfg).hidden, pmp_query(net, x, cfg, engine="generic").hidden)


def test_batch_independent_of_workers_and_split():
    rng = np.random.default_rng(5)
    net = build_network(5, 8, {i: [1 + (i % 5), 1 + ((i + 2) % 5)] for i in range(6, 14)})
    net = net.with_values(rng.uniform(0.1, 2.0, size=len(net.params)))
    X = rng.integers(0, 2, size=(12, 8))
    a = pmp_batch(net, X, 1.0, seed=7, key=(3,), workers=1)
    b = pmp_batch(net, X, 1.0, seed=7, key=(3,), workers=4)
    assert np.array_equal(a, b)
    # sample b always draws from stream (seed, *key, b)
    c = pmp_batch(net, X[:5], 1.0, seed=7, key=(3,))
    assert np.array_equal(a[:5], c)


def test_rejects_negative_temperature():
    net = chain_net()
    with pytest.raises(ValueError):
        PmpQueryConfig(temperature=-1.0)
    with pytest.raises(ValueError):
        pmp_batch(net, [[1]], temperature=-0.5)
    with pytest.raises(ValueError):
        pmp_query(net, [1], engine="nope")


def test_samples_cover_posterior_support():
    net = explaining_away_net()
    draws = pmp_batch(net, np.ones((2000, 1), dtype=np.int8), 1.0, seed=1)
    seen = {tuple(r) for r in draws.tolist()}
    assert (1, 0) in seen and (0, 1) in seen
    assert (0, 0) not in seen  # x=1 cannot be explained without a cause


def test_lowered_observation_unaries():
    net = chain_net()
    g = lower_to_factor_graph(net, [0]).graph
    assert g.unaries[2].tolist() == [0.0, -np.inf]
