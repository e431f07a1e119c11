"""Sinkhorn normalization and Gumbel-perturbed sampling."""
import numpy as np
import pytest

from orderinfer.sinkhorn import (
    MAX_ABS_SCORE,
    DoublyStochasticMatrix,
    SinkhornConfig,
    birkhoff_residual,
    gumbel_noise,
    log_sinkhorn,
    sample_gumbel_sinkhorn,
    sinkhorn_operator,
)


def test_operator_converges_on_random_inputs():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(2, 9))
        b = sinkhorn_operator(rng.normal(size=(n, n)), iterations=200)
        assert birkhoff_residual(b.b) <= 1e-6


def test_operator_at_low_temperature_scale():
    # half-unit scores stretched tenfold by tau=0.1 still reach 1e-6;
    # unit-scale scores at this tau genuinely need more than 200 steps
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.uniform(0.0, 0.5, size=(8, 8)) / 0.1
        b = sinkhorn_operator(x, iterations=200)
        assert birkhoff_residual(b.b) <= 1e-6


def test_operator_under_convergence_is_carried_not_hidden():
    # a sharp matrix that cannot converge in few iterations comes back
    # with an honest widened tolerance instead of a validation error
    x = np.random.default_rng(42).normal(size=(8, 8)) / 0.02
    b = sinkhorn_operator(x, iterations=5)
    assert b.tol >= birkhoff_residual(b.b) > 1e-6


def test_log_space_matches_direct_normalization():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5, 5))
    direct = sinkhorn_operator(x, iterations=80).b
    logged = np.exp(log_sinkhorn(x, 80))
    np.testing.assert_allclose(logged, direct, atol=1e-12)


def test_log_sinkhorn_batched_agrees_with_loop():
    rng = np.random.default_rng(3)
    stack = rng.normal(size=(4, 6, 6))
    batched = log_sinkhorn(stack, 60)
    for i in range(4):
        np.testing.assert_allclose(batched[i], log_sinkhorn(stack[i], 60), atol=1e-12)


def test_doubly_stochastic_validation():
    with pytest.raises(ValueError):
        DoublyStochasticMatrix(np.array([[0.5, 0.5], [0.9, 0.1]]), tol=1e-6)
    with pytest.raises(ValueError):
        DoublyStochasticMatrix(np.array([[1.0, -0.0001], [0.0, 1.0]]))
    d = DoublyStochasticMatrix(np.full((3, 3), 1 / 3))
    assert d.n == 3


def test_birkhoff_residual_zero_on_permutation():
    assert birkhoff_residual(np.eye(4)) == 0.0


def test_gumbel_noise_is_seed_deterministic():
    a = gumbel_noise((3, 3), np.random.default_rng(9))
    b = gumbel_noise((3, 3), np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    assert np.isfinite(a).all()


def test_sample_prefix_stability():
    # sample k depends on (seed, k) only: a longer run extends, never reshuffles
    x = np.random.default_rng(4).normal(size=(5, 5))
    cfg = SinkhornConfig(tau=1.0, iterations=60, seed=11)
    short = sample_gumbel_sinkhorn(x, cfg, 3)
    long = sample_gumbel_sinkhorn(x, cfg, 6)
    for a, b in zip(short, long):
        np.testing.assert_array_equal(a.b, b.b)


def test_samples_are_doubly_stochastic_and_seed_sensitive():
    x = np.random.default_rng(5).normal(size=(6, 6))
    cfg = SinkhornConfig(tau=0.5, iterations=120, seed=0)
    draws = sample_gumbel_sinkhorn(x, cfg, 4)
    assert len(draws) == 4
    for d in draws:
        assert birkhoff_residual(d.b) <= d.tol
    other = sample_gumbel_sinkhorn(x, SinkhornConfig(tau=0.5, iterations=120, seed=1), 4)
    assert any((a.b != b.b).any() for a, b in zip(draws, other))


def test_score_magnitude_guard():
    bad = np.zeros((3, 3))
    bad[0, 0] = MAX_ABS_SCORE * 10
    with pytest.raises(ValueError):
        sinkhorn_operator(bad, iterations=10)


def test_config_validation():
    with pytest.raises(ValueError):
        SinkhornConfig(tau=0.0)
    with pytest.raises(ValueError):
        SinkhornConfig(tau=1.0, iterations=0)
