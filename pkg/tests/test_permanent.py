"""Exact and Bethe permanents against enumeration oracles."""
import math

import numpy as np
import pytest

from orderinfer import oracles
from orderinfer.permanent import (
    RYSER_MAX_N,
    bethe_log_permanent_exp,
    bethe_many,
    bethe_permanent,
    exact_marginals_exp,
    exact_permanent,
    grad_log_q,
    log_permanent_exp,
    log_q_density,
)
from orderinfer.permutations import Permutation, all_permutations, to_matrix

HALF_LOG2 = 0.5 * math.log(2.0)


def test_ryser_equals_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(60):
        n = int(rng.integers(1, 8))
        a = rng.uniform(0.1, 3.0, size=(n, n))
        assert exact_permanent(a) == pytest.approx(
            oracles.permanent_by_enumeration(a), rel=1e-12)


def test_ryser_handles_signed_entries():
    rng = np.random.default_rng(1)
    for _ in range(30):
        a = rng.normal(size=(5, 5))
        assert exact_permanent(a) == pytest.approx(
            oracles.permanent_by_enumeration(a), rel=1e-10, abs=1e-12)


def test_known_values():
    assert exact_permanent(np.eye(4)) == 1.0
    assert exact_permanent(np.ones((4, 4))) == pytest.approx(24.0, rel=1e-13)
    # 2x2: ad + bc
    assert exact_permanent(np.array([[1.0, 2.0], [3.0, 4.0]])) == pytest.approx(10.0)


def test_log_permanent_exp_is_shift_stable():
    rng = np.random.default_rng(2)
    for _ in range(30):
        n = int(rng.integers(2, 7))
        x = rng.normal(size=(n, n)) * 3
        direct = oracles.log_permanent_exp_by_enumeration(x)
        assert log_permanent_exp(x) == pytest.approx(direct, abs=1e-10)
    # scores far outside naive exp range
    big = rng.normal(size=(5, 5)) + 400.0
    assert np.isfinite(log_permanent_exp(big))
    assert log_permanent_exp(big) == pytest.approx(
        log_permanent_exp(big - 400.0) + 5 * 400.0, rel=1e-12)


def test_bethe_sandwich_against_exact():
    # sigma 1.5 log-scores produce sharp instances where the message
    # iteration needs thousands of sweeps; the budget covers the
    # slowest so convergence can be asserted strictly
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(2, 9))
        x = rng.normal(size=(n, n)) * 1.5
        exact = log_permanent_exp(x)
        res = bethe_log_permanent_exp(x, max_iters=4000)
        assert res.converged
        assert exact - n * HALF_LOG2 - 1e-8 <= res.log_value <= exact + 1e-8


def test_bethe_all_ones():
    # perm = 24; the lower bound at n=4 is 24/4 = 6
    res = bethe_permanent(np.ones((4, 4)))
    val = math.exp(res.log_value)
    assert 6.0 - 1e-6 <= val <= 24.0 + 1e-6


def test_bethe_agrees_with_mirror_ascent_oracle():
    # independent route: projected entropic mirror ascent on the same
    # free energy must land on the same optimum
    rng = np.random.default_rng(4)
    for _ in range(10):
        n = int(rng.integers(2, 6))
        x = rng.normal(size=(n, n))
        spa = bethe_log_permanent_exp(x).log_value
        mirror = oracles.bethe_log_permanent_mirror(x)
        assert spa == pytest.approx(mirror, abs=1e-7)


def test_bethe_many_matches_single():
    rng = np.random.default_rng(5)
    stack = rng.normal(size=(6, 5, 5))
    logs, gammas, residuals, msgs = bethe_many(stack)
    for i in range(6):
        single = bethe_log_permanent_exp(stack[i])
        assert logs[i] == pytest.approx(single.log_value, abs=1e-9)
        np.testing.assert_allclose(gammas[i], single.gamma, atol=1e-6)
    # warm restart from returned messages converges immediately
    logs2, _, residuals2, _ = bethe_many(stack, messages=msgs)
    np.testing.assert_allclose(logs2, logs, atol=1e-9)


def test_bethe_gamma_is_doubly_stochastic():
    x = np.random.default_rng(6).normal(size=(7, 7))
    res = bethe_log_permanent_exp(x)
    np.testing.assert_allclose(res.gamma.sum(axis=0), 1.0, atol=1e-7)
    np.testing.assert_allclose(res.gamma.sum(axis=1), 1.0, atol=1e-7)
    assert (res.gamma >= 0).all()


def test_exact_marginals_match_enumeration():
    rng = np.random.default_rng(7)
    for _ in range(20):
        n = int(rng.integers(2, 6))
        x = rng.normal(size=(n, n))
        np.testing.assert_allclose(
            exact_marginals_exp(x), oracles.marginals_by_enumeration(x), atol=1e-12)


def test_density_normalizes_exactly():
    rng = np.random.default_rng(8)
    for _ in range(20):
        n = int(rng.integers(2, 6))
        x = rng.normal(size=(n, n)) * 2
        total = sum(math.exp(log_q_density(x, z, mode="exact"))
                    for z in all_permutations(n))
        assert total == pytest.approx(1.0, abs=1e-12)


def test_density_accepts_matrix_or_order():
    x = np.random.default_rng(9).normal(size=(4, 4))
    z = Permutation((2, 4, 1, 3))
    assert log_q_density(x, z, mode="exact") == pytest.approx(
        log_q_density(x, to_matrix(z), mode="exact"), abs=1e-15)


def test_bethe_density_overestimates_never_by_more_than_bound():
    # log q_bethe - log q_exact = log Z_exact - log Z_bethe in [0, n/2 log 2]
    rng = np.random.default_rng(10)
    for _ in range(10):
        n = int(rng.integers(2, 6))
        x = rng.normal(size=(n, n))
        z = next(all_permutations(n))
        gap = log_q_density(x, z, mode="bethe") - log_q_density(x, z, mode="exact")
        assert -1e-8 <= gap <= n * HALF_LOG2 + 1e-8


def test_grad_log_q_matches_finite_differences():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(4, 4))
    z = Permutation((3, 1, 4, 2))
    for mode in ("exact", "bethe"):
        g = grad_log_q(x, z, mode=mode)
        h = 1e-6
        for i in range(4):
            for j in range(4):
                e = np.zeros((4, 4))
                e[i, j] = h
                fd = (log_q_density(x + e, z, mode) - log_q_density(x - e, z, mode)) / (2 * h)
                assert g[i, j] == pytest.approx(fd, abs=2e-5)


def test_score_function_identity():
    # sum_P q(P) grad log q(P) = 0; exact marginals make it hold tightly
    rng = np.random.default_rng(12)
    for n in range(2, 6):
        x = rng.normal(size=(n, n))
        acc = np.zeros((n, n))
        for z in all_permutations(n):
            q = math.exp(log_q_density(x, z, mode="exact"))
            acc += q * grad_log_q(x, z, mode="exact")
        assert np.abs(acc).max() <= 1e-9
        assert oracles.score_function_residual(x) <= 1e-9


def test_size_and_validation_guards():
    with pytest.raises(ValueError):
        exact_permanent(np.ones((RYSER_MAX_N + 1, RYSER_MAX_N + 1)))
    with pytest.raises(ValueError):
        bethe_permanent(np.array([[1.0, 0.0], [1.0, 1.0]]))
    with pytest.raises(ValueError):
        log_permanent_exp(np.array([[np.nan, 0.0], [0.0, 1.0]]))
