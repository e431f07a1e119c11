"""Encoding round trips and validation for generation orders."""
import numpy as np
import pytest

from orderinfer.permutations import (
    InsertionCode,
    Permutation,
    PermutationMatrix,
    all_permutations,
    from_matrix,
    identity,
    matrix_score,
    permutation_from_sequence,
    r_to_z,
    to_matrix,
    z_to_r,
)


def test_matrix_round_trip_exhaustive():
    for n in range(1, 7):
        for z in all_permutations(n):
            assert from_matrix(to_matrix(z)) == z


def test_insertion_round_trip_exhaustive():
    for n in range(1, 7):
        seen = set()
        for z in all_permutations(n):
            r = z_to_r(z)
            assert r_to_z(r) == z
            seen.add(r.r)
        # bijectivity: n! distinct codes
        assert len(seen) == len(list(all_permutations(n)))


def test_second_token_before_first():
    # inserting at slot 0 twice puts the later token to the left
    assert r_to_z(InsertionCode((0, 0))) == Permutation((2, 1))
    assert z_to_r(Permutation((2, 1))).r == (0, 0)


def test_matrix_rows_are_step_one_hots():
    z = Permutation((3, 1, 2))
    p = to_matrix(z).p
    assert p.tolist() == [[0, 0, 1], [1, 0, 0], [0, 1, 0]]


def test_matrix_score_matches_frobenius_product():
    rng = np.random.default_rng(7)
    for _ in range(50):
        n = int(rng.integers(2, 8))
        x = rng.normal(size=(n, n))
        z = permutation_from_sequence(rng.permutation(n) + 1)
        assert matrix_score(x, z) == pytest.approx(
            float((x * to_matrix(z).p).sum()), abs=1e-12)


def test_identity_and_enumeration_count():
    assert identity(4).z == (1, 2, 3, 4)
    assert len(list(all_permutations(5))) == 120
    assert next(iter(all_permutations(3))).z == (1, 2, 3)


def test_permutation_validation():
    with pytest.raises(ValueError):
        Permutation(())
    with pytest.raises(ValueError):
        Permutation((1, 3))
    with pytest.raises(ValueError):
        Permutation((1, 1, 2))
    with pytest.raises(ValueError):
        Permutation((0, 1))


def test_insertion_code_validation():
    with pytest.raises(ValueError):
        InsertionCode(())
    with pytest.raises(ValueError):
        InsertionCode((1,))
    with pytest.raises(ValueError):
        InsertionCode((0, 2))
    InsertionCode((0, 1, 2))


def test_permutation_matrix_validation():
    with pytest.raises(ValueError):
        PermutationMatrix(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        PermutationMatrix(np.array([[1, 1], [0, 0]]))
    with pytest.raises(ValueError):
        PermutationMatrix(np.array([[2, 0], [0, 1]]))
    m = PermutationMatrix(np.eye(3))
    with pytest.raises(ValueError):
        m.p[0, 0] = 0  # read-only


def test_permutation_matrix_equality_and_hash():
    a = PermutationMatrix(np.eye(3))
    b = to_matrix(identity(3))
    assert a == b and hash(a) == hash(b)
    assert a != to_matrix(Permutation((2, 1, 3)))
