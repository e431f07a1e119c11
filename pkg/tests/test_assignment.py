"""Maximum-weight assignment against exhaustive search."""
import numpy as np
import pytest

from orderinfer.assignment import (
    BRUTE_FORCE_MAX_N,
    brute_force_max,
    hungarian_max,
    hungarian_order,
    max_assignment_duals,
    score_of,
)
from orderinfer.permutations import Permutation, from_matrix, identity


def test_matches_brute_force_on_random_matrices():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(1, 9))
        w = rng.normal(size=(n, n)) * 10.0 ** rng.integers(-2, 3)
        best = score_of(w, brute_force_max(w))
        assert score_of(w, hungarian_max(w)) == best
        assert score_of(w, hungarian_max(w, ties="any")) == best


def test_integer_weights_exact():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(2, 8))
        w = rng.integers(-50, 50, size=(n, n)).astype(float)
        assert score_of(w, hungarian_max(w)) == score_of(w, brute_force_max(w))


def test_lexicographic_tie_breaking():
    # every assignment of a constant matrix is optimal; the contract
    # picks the lexicographically first one, the identity
    assert from_matrix(hungarian_max(np.zeros((4, 4)))) == identity(4)
    w = np.ones((3, 3))
    w[0, 0] = w[1, 1] = 2.0  # still tied between (3,) choices in row 2
    assert from_matrix(hungarian_max(w)) == identity(3)


def test_tie_mode_any_still_optimal():
    w = np.zeros((5, 5))
    p = hungarian_max(w, ties="any")
    assert score_of(w, p) == 0.0


def test_duals_certify_optimality():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(2, 8))
        w = rng.normal(size=(n, n))
        a, b = max_assignment_duals(w)
        assert (a[:, None] + b[None, :] >= w - 1e-9).all()
        # complementary slackness: dual value equals the optimal score
        assert a.sum() + b.sum() == pytest.approx(score_of(w, hungarian_max(w)), abs=1e-9)


def test_order_wrapper_and_score_of_accept_orders():
    w = np.array([[0.0, 5.0], [5.0, 0.0]])
    z = hungarian_order(w)
    assert z == Permutation((2, 1))
    assert score_of(w, z) == 10.0


def test_brute_force_size_guard():
    with pytest.raises(ValueError):
        brute_force_max(np.zeros((BRUTE_FORCE_MAX_N + 1, BRUTE_FORCE_MAX_N + 1)))


def test_weight_validation():
    with pytest.raises(ValueError):
        hungarian_max(np.array([[np.inf, 0.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        hungarian_max(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        hungarian_max(np.zeros((2, 2)), ties="fastest")
