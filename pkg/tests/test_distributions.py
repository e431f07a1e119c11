"""Order distributions: densities, sampling, gradients, entropy."""
import math

import numpy as np
import pytest

from orderinfer import oracles
from orderinfer.distributions import (
    GumbelMatchingOrder,
    PlackettLuceOrder,
    entropy_estimate,
    grad_log_density,
    log_density,
    sample,
)
from orderinfer.permutations import Permutation, all_permutations

HALF_LOG2 = 0.5 * math.log(2.0)


def test_gm_exact_density_matches_enumeration_table():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 4))
    d = GumbelMatchingOrder(x, density_mode="exact")
    table = oracles.density_table_exact(x)
    for z, q in table.items():
        assert log_density(d, z) == pytest.approx(math.log(q), abs=1e-10)
    assert sum(table.values()) == pytest.approx(1.0, abs=1e-12)


def test_gm_uniform_scores_are_uniform():
    d = GumbelMatchingOrder(np.zeros((3, 3)), density_mode="exact")
    for z in all_permutations(3):
        assert log_density(d, z) == pytest.approx(-math.log(6), abs=1e-12)
    counts: dict[tuple, int] = {}
    for z, _ in sample(d, 6000, seed=7):
        counts[z.z] = counts.get(z.z, 0) + 1
    assert len(counts) == 6
    for c in counts.values():
        # 5 sigma around 1000 is about 97
        assert abs(c - 1000) < 150


def test_gm_bethe_normalizer_within_sandwich():
    rng = np.random.default_rng(1)
    for _ in range(10):
        n = int(rng.integers(2, 7))
        x = rng.normal(size=(n, n))
        exact = GumbelMatchingOrder(x, density_mode="exact").log_normalizer
        bethe = GumbelMatchingOrder(x, density_mode="bethe").log_normalizer
        assert exact - n * HALF_LOG2 - 1e-8 <= bethe <= exact + 1e-8


def test_pl_density_normalizes():
    rng = np.random.default_rng(2)
    d = PlackettLuceOrder(rng.normal(size=4))
    total = sum(math.exp(log_density(d, z)) for z in all_permutations(4))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_pl_first_choice_frequency():
    s = np.array([2.0, 0.0, -2.0])
    d = PlackettLuceOrder(s)
    want = math.exp(2.0) / (math.exp(2.0) + 1.0 + math.exp(-2.0))
    draws = sample(d, 50_000, seed=3)
    got = sum(1 for z, _ in draws if z.z[0] == 1) / len(draws)
    assert got == pytest.approx(want, abs=0.01)


def test_pl_sequential_density_value():
    # picking positions in score order: first factor e2/(e2+1+e-2),
    # second e0/(e0+e-2), last 1
    d = PlackettLuceOrder(np.array([2.0, 0.0, -2.0]))
    z = Permutation((1, 2, 3))
    want = (2.0 - math.log(math.exp(2) + 1 + math.exp(-2))
            + 0.0 - math.log(1 + math.exp(-2)))
    assert log_density(d, z) == pytest.approx(want, abs=1e-12)


def test_samples_carry_their_own_density():
    rng = np.random.default_rng(4)
    gm = GumbelMatchingOrder(rng.normal(size=(4, 4)), density_mode="exact")
    pl = PlackettLuceOrder(rng.normal(size=5))
    for d in (gm, pl):
        for z, lq in sample(d, 5, seed=11):
            assert lq == pytest.approx(log_density(d, z), abs=1e-12)


def test_sample_prefix_stability_and_determinism():
    rng = np.random.default_rng(5)
    gm = GumbelMatchingOrder(rng.normal(size=(4, 4)))
    pl = PlackettLuceOrder(rng.normal(size=4))
    for d in (gm, pl):
        long = sample(d, 6, seed=9)
        short = sample(d, 3, seed=9)
        assert [z.z for z, _ in long[:3]] == [z.z for z, _ in short]
        again = sample(d, 6, seed=9)
        assert [z.z for z, _ in long] == [z.z for z, _ in again]
        other = sample(d, 6, seed=10)
        assert [z.z for z, _ in long] != [z.z for z, _ in other]


def test_grad_log_density_gm_matches_finite_differences():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(4, 4))
    z = Permutation((2, 4, 3, 1))
    h = 1e-6
    for mode in ("exact", "bethe"):
        g = grad_log_density(GumbelMatchingOrder(x, density_mode=mode), z)
        for i in range(4):
            for j in range(4):
                e = np.zeros((4, 4))
                e[i, j] = h
                hi = log_density(GumbelMatchingOrder(x + e, density_mode=mode), z)
                lo = log_density(GumbelMatchingOrder(x - e, density_mode=mode), z)
                assert g[i, j] == pytest.approx((hi - lo) / (2 * h), abs=2e-5)


def test_grad_log_density_pl_matches_finite_differences():
    rng = np.random.default_rng(7)
    s = rng.normal(size=5)
    z = Permutation((3, 1, 5, 2, 4))
    g = grad_log_density(PlackettLuceOrder(s), z)
    h = 1e-6
    for i in range(5):
        e = np.zeros(5)
        e[i] = h
        fd = (log_density(PlackettLuceOrder(s + e), z)
              - log_density(PlackettLuceOrder(s - e), z)) / (2 * h)
        assert g[i] == pytest.approx(fd, abs=1e-7)


def test_entropy_estimate_pl_matches_enumeration():
    rng = np.random.default_rng(8)
    d = PlackettLuceOrder(rng.normal(size=4))
    exact = -sum(
        math.exp(log_density(d, z)) * log_density(d, z) for z in all_permutations(4))
    est = entropy_estimate(d, sample(d, 20_000, seed=13))
    assert est == pytest.approx(exact, rel=0.03)


def test_entropy_estimate_gm_uniform_is_log_factorial():
    d = GumbelMatchingOrder(np.zeros((3, 3)), density_mode="exact")
    est = entropy_estimate(d, sample(d, 50, seed=14))
    assert est == pytest.approx(math.log(6), abs=1e-12)


def test_kind_tags_and_sizes():
    gm = GumbelMatchingOrder(np.zeros((3, 3)))
    pl = PlackettLuceOrder(np.zeros(4))
    assert gm.kind == "gumbel_matching" and gm.n == 3
    assert pl.kind == "plackett_luce" and pl.n == 4


def test_validation_errors():
    with pytest.raises(ValueError):
        GumbelMatchingOrder(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        GumbelMatchingOrder(np.array([[np.inf, 0.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        GumbelMatchingOrder(np.zeros((2, 2)), tau=0.0)
    with pytest.raises(ValueError):
        GumbelMatchingOrder(np.zeros((2, 2)), density_mode="laplace")
    with pytest.raises(ValueError):
        PlackettLuceOrder(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        PlackettLuceOrder(np.array([]))
    d = PlackettLuceOrder(np.zeros(3))
    with pytest.raises(ValueError):
        log_density(d, Permutation((1, 2, 3, 4)))
    with pytest.raises(ValueError):
        sample(d, 0, seed=0)
    with pytest.raises(ValueError):
        grad_log_density(d, Permutation((2, 1)))
    with pytest.raises(ValueError):
        entropy_estimate(d, [])
