"""Maximum-weight assignment (Hungarian) with deterministic tie-breaking.

``hungarian_max`` maximizes ``sum_i w[i, z_i]`` over permutations by
negating into the classical minimization problem and running a shortest
augmenting path solver in O(n^3).  Among exactly tied optima it returns
the lexicographically smallest assignment (lowest row first, then lowest
column), matching ``brute_force_max`` which scans permutations in
lexicographic order.
"""
from __future__ import annotations

import itertools

import numpy as np
import scipy.optimize

from .permutations import Permutation, PermutationMatrix, to_matrix

BRUTE_FORCE_MAX_N = 10


def _validate_weights(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] == 0:
        raise ValueError(f"expected nonempty square weight matrix, got shape {w.shape}")
    if not np.isfinite(w).all():
        raise ValueError("weights must be finite")
    return w


def _lap_min(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Solve min-cost assignment; returns (col_of_row, u, v).

    Shortest augmenting path formulation with dual potentials (u, v)
    satisfying u[i] + v[j] <= cost[i, j], with equality on the returned
    assignment.  Indices in the working arrays are 1-based with a
    virtual column 0, following the classical presentation.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = int(p[j0])
            free = ~used[1:]
            cur = cost[i0 - 1, :] - u[i0] - v[1:]
            upd = free & (cur < minv[1:])
            minv[1:][upd] = cur[upd]
            way[1:][upd] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = int(way[j0])
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        col_of_row[p[j] - 1] = j - 1
    return col_of_row, u[1:], v[1:]


def max_assignment_duals(w) -> tuple[np.ndarray, np.ndarray]:
    """Potentials (a, b) with a[i] + b[j] >= w[i, j], tight on an optimum.

    Useful wherever a per-row/per-column shift that dominates w is
    needed (for instance rescaling exp(w) so its permanent is tame).
    """
    w = _validate_weights(w)
    _, u, v = _lap_min(-w)
    return -u, -v


def _kuhn_matching_size(adj: np.ndarray) -> int:
    """Maximum bipartite matching size for a boolean adjacency matrix."""
    n_rows, n_cols = adj.shape
    match_col = np.full(n_cols, -1, dtype=np.int64)

    def try_row(i: int, seen: np.ndarray) -> bool:
        for j in np.flatnonzero(adj[i]):
            if seen[j]:
                continue
            seen[j] = True
            if match_col[j] < 0 or try_row(int(match_col[j]), seen):
                match_col[j] = i
                return True
        return False

    size = 0
    for i in range(n_rows):
        if try_row(i, np.zeros(n_cols, dtype=bool)):
            size += 1
    return size


def _lex_min_perfect_matching(tight: np.ndarray) -> np.ndarray | None:
    """Lexicographically smallest perfect matching of a boolean graph.

    Greedy by row: fix the smallest column that keeps the remaining
    rows matchable.  Returns col_of_row or None if no perfect matching.
    """
    n = tight.shape[0]
    if _kuhn_matching_size(tight) < n:
        return None
    avail = np.ones(n, dtype=bool)
    col_of_row = np.zeros(n, dtype=np.int64)
    for i in range(n):
        placed = False
        for j in np.flatnonzero(tight[i] & avail):
            rest = tight[i + 1:][:, avail & (np.arange(n) != j)]
            if rest.shape[0] == 0 or _kuhn_matching_size(rest) == rest.shape[0]:
                col_of_row[i] = j
                avail[j] = False
                placed = True
                break
        if not placed:
            return None
    return col_of_row


def _score(w: np.ndarray, col_of_row: np.ndarray) -> float:
    return float(w[np.arange(w.shape[0]), col_of_row].sum())


def hungarian_max(w, ties: str = "lexicographic") -> PermutationMatrix:
    """Permutation matrix maximizing the Frobenius inner product with w.

    With ``ties="lexicographic"`` (the default) exactly tied optima are
    broken lexicographically: lowest row first, then lowest column.
    Tie handling is triggered only when the dual certificate leaves
    more than n tight edges, so the generic path stays O(n^3).

    ``ties="any"`` skips the dual certificate and returns whichever
    optimum the compiled solver lands on (still deterministic); use it
    in sampling loops where inputs are continuous and ties have
    probability zero.
    """
    w = _validate_weights(w)
    n = w.shape[0]
    if ties == "any":
        rows, cols = scipy.optimize.linear_sum_assignment(-w)
        p = np.zeros((n, n), dtype=np.int64)
        p[rows, cols] = 1
        return PermutationMatrix(p)
    if ties != "lexicographic":
        raise ValueError(f"unknown tie mode: {ties!r}")
    cost = -w
    col_of_row, u, v = _lap_min(cost)
    reduced = cost - u[:, None] - v[None, :]
    scale = max(1.0, float(np.abs(cost).max()))
    tol = 1e-9 * scale
    matched_slack = float(np.abs(reduced[np.arange(n), col_of_row]).max())
    tight = reduced <= max(tol, 2.0 * matched_slack)
    if int(tight.sum()) > n:
        lex = _lex_min_perfect_matching(tight)
        if lex is not None and _score(w, lex) >= _score(w, col_of_row):
            col_of_row = lex
    p = np.zeros((n, n), dtype=np.int64)
    p[np.arange(n), col_of_row] = 1
    return PermutationMatrix(p)


_PERM_CACHE: dict[int, np.ndarray] = {}


def _all_perms_array(n: int) -> np.ndarray:
    if n not in _PERM_CACHE:
        _PERM_CACHE[n] = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    return _PERM_CACHE[n]


def brute_force_max(w) -> PermutationMatrix:
    """Exhaustive argmax over all permutations; oracle for small n.

    Scans lexicographically and keeps strict improvements, so ties
    resolve to the lexicographically smallest optimum.
    """
    w = _validate_weights(w)
    n = w.shape[0]
    if n > BRUTE_FORCE_MAX_N:
        raise ValueError(f"brute force limited to n <= {BRUTE_FORCE_MAX_N}, got {n}")
    best_cols: np.ndarray | None = None
    best = -np.inf
    rows = np.arange(n)
    perms = _all_perms_array(n) if n <= 8 else None
    if perms is not None:
        scores = w[rows, perms].sum(axis=1)
        k = int(np.argmax(scores))
        best_cols = perms[k]
    else:
        for cols in itertools.permutations(range(n)):
            cols_arr = np.asarray(cols, dtype=np.int64)
            s = _score(w, cols_arr)
            if s > best:
                best = s
                best_cols = cols_arr
    assert best_cols is not None
    p = np.zeros((n, n), dtype=np.int64)
    p[rows, best_cols] = 1
    return PermutationMatrix(p)


def hungarian_order(w) -> Permutation:
    """Convenience wrapper returning the order instead of the matrix."""
    from .permutations import from_matrix

    return from_matrix(hungarian_max(w))


def score_of(w, p: PermutationMatrix | Permutation) -> float:
    """Score of an assignment under w, summed in row order."""
    w = _validate_weights(w)
    if isinstance(p, Permutation):
        p = to_matrix(p)
    cols = np.argmax(p.p, axis=1)
    return _score(w, cols)
