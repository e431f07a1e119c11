"""Permutations of generation order and their matrix and insertion encodings.

Conventions used across the package:

* A generation order ``z`` is a permutation of ``{1, ..., n}`` stored
  1-based: ``z[t-1]`` is the absolute (natural, left-to-right) position
  of the token generated at step ``t``.
* The matrix encoding puts ``one_hot(z_t)`` in row ``t``, so rows index
  generation steps and columns index absolute positions.  The Frobenius
  inner product of a score matrix with this encoding sums one score per
  step: ``<X, to_matrix(z)> = sum_t X[t-1, z_t - 1]``.
* The insertion encoding ``r`` is 0-based: ``r[t-1]`` is the slot, in
  the partial output arranged left to right, into which the step-``t``
  token is inserted.  Slot ``s`` at step ``t`` means "after ``s`` of the
  ``t-1`` already placed tokens", so ``r[t-1]`` ranges over ``0..t-1``.

>>> z = Permutation((2, 1))
>>> z_to_r(z).r
(0, 0)
>>> from_matrix(to_matrix(z)) == z
True
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np


@dataclass(frozen=True)
class Permutation:
    """A generation order: 1-based absolute positions, one per step."""

    z: tuple[int, ...]

    def __post_init__(self) -> None:
        z = tuple(int(v) for v in self.z)
        object.__setattr__(self, "z", z)
        if len(z) == 0:
            raise ValueError("empty permutation")
        if sorted(z) != list(range(1, len(z) + 1)):
            raise ValueError(f"not a permutation of 1..{len(z)}: {z}")

    @property
    def n(self) -> int:
        return len(self.z)


@dataclass(frozen=True, eq=False)
class PermutationMatrix:
    """0/1 matrix with exactly one 1 per row and per column.

    Row ``t`` is the one-hot of the absolute position generated at step
    ``t + 1``.  The array is made read-only on construction.
    """

    p: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.p, dtype=np.int64)
        if p.ndim != 2 or p.shape[0] != p.shape[1] or p.shape[0] == 0:
            raise ValueError(f"expected square matrix, got shape {p.shape}")
        if not np.isin(p, (0, 1)).all():
            raise ValueError("entries must be 0 or 1")
        if (p.sum(axis=0) != 1).any() or (p.sum(axis=1) != 1).any():
            raise ValueError("each row and column must contain exactly one 1")
        p.setflags(write=False)
        object.__setattr__(self, "p", p)

    @property
    def n(self) -> int:
        return self.p.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PermutationMatrix):
            return NotImplemented
        return self.p.shape == other.p.shape and bool((self.p == other.p).all())

    def __hash__(self) -> int:
        return hash(self.p.tobytes())


@dataclass(frozen=True)
class InsertionCode:
    """Relative insertion slots, one per step; ``r[t-1]`` in ``0..t-1``."""

    r: tuple[int, ...]

    def __post_init__(self) -> None:
        r = tuple(int(v) for v in self.r)
        object.__setattr__(self, "r", r)
        if len(r) == 0:
            raise ValueError("empty insertion code")
        for t, slot in enumerate(r, start=1):
            if not 0 <= slot <= t - 1:
                raise ValueError(f"slot {slot} at step {t} outside 0..{t - 1}")

    @property
    def n(self) -> int:
        return len(self.r)


def to_matrix(z: Permutation) -> PermutationMatrix:
    """Matrix encoding: row ``t`` is ``one_hot(z_t)``.

    >>> to_matrix(Permutation((2, 1))).p
    array([[0, 1],
           [1, 0]])
    """
    n = z.n
    p = np.zeros((n, n), dtype=np.int64)
    p[np.arange(n), np.asarray(z.z) - 1] = 1
    return PermutationMatrix(p)


def from_matrix(p: PermutationMatrix) -> Permutation:
    """Inverse of :func:`to_matrix`.

    >>> from_matrix(PermutationMatrix(np.eye(3))).z
    (1, 2, 3)
    """
    return Permutation(tuple(int(j) + 1 for j in np.argmax(p.p, axis=1)))


def z_to_r(z: Permutation) -> InsertionCode:
    """Insertion code of an order: ``r_t = |{s < t : z_s < z_t}|``.

    Tokens already placed at smaller absolute positions sit to the left
    of the incoming token, so counting them gives its slot.

    >>> z_to_r(Permutation((3, 1, 2))).r
    (0, 0, 1)
    """
    r = []
    for t, zt in enumerate(z.z):
        r.append(sum(1 for zs in z.z[:t] if zs < zt))
    return InsertionCode(tuple(r))


def r_to_z(r: InsertionCode) -> Permutation:
    """Replay insertions to recover the order; inverse of :func:`z_to_r`.

    The step labels are inserted into a growing arranged list; the final
    index of label ``t`` is the absolute position its token ends up at.

    >>> r_to_z(InsertionCode((0, 0, 1))).z
    (3, 1, 2)
    """
    arranged: list[int] = []
    for t, slot in enumerate(r.r, start=1):
        arranged.insert(slot, t)
    z = [0] * len(r.r)
    for pos, t in enumerate(arranged, start=1):
        z[t - 1] = pos
    return Permutation(tuple(z))


def identity(n: int) -> Permutation:
    """The left-to-right order (1, 2, ..., n)."""
    return Permutation(tuple(range(1, n + 1)))


def all_permutations(n: int) -> Iterator[Permutation]:
    """All n! orders in lexicographic order.  Intended for small n."""
    for z in itertools.permutations(range(1, n + 1)):
        yield Permutation(z)


def matrix_score(x: np.ndarray, z: Permutation) -> float:
    """Frobenius inner product ``<x, to_matrix(z)>`` without materializing it."""
    x = np.asarray(x, dtype=float)
    n = z.n
    if x.shape != (n, n):
        raise ValueError(f"score matrix shape {x.shape} does not match n={n}")
    return float(x[np.arange(n), np.asarray(z.z) - 1].sum())


def permutation_from_sequence(seq: Sequence[int]) -> Permutation:
    """Build a Permutation from any integer sequence (validates)."""
    return Permutation(tuple(int(v) for v in seq))
