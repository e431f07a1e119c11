"""Slow reference routes used to validate the fast implementations.

Everything here trades speed for obviousness: permanents by explicit
enumeration over S_n, densities from exhaustive tables, the Bethe
objective maximized by mirror ascent instead of message passing, and
sequence likelihoods replayed one insertion at a time.  The tests and
the permcheck subcommand compare production code against these routes;
none of this should be called from a training loop.
"""

from __future__ import annotations

import itertools
import math
from bisect import bisect_left
from collections.abc import Sequence

import numpy as np

from .corpus import Episode
from .decoder import DecoderParams
from .permutations import Permutation, PermutationMatrix
from .sinkhorn import log_sinkhorn

ENUMERATION_MAX_N = 10


def _square(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if a.shape[0] > ENUMERATION_MAX_N:
        raise ValueError(f"enumeration over S_{a.shape[0]} is not tractable")
    return a


def permanent_by_enumeration(a) -> float:
    """Sum over all n! permutations of entry products."""
    a = _square(a)
    n = a.shape[0]
    return float(sum(
        math.prod(a[i, s[i]] for i in range(n))
        for s in itertools.permutations(range(n))))


def log_permanent_exp_by_enumeration(x) -> float:
    """log perm(exp x) via a log-sum-exp over all permutation scores."""
    x = _square(x)
    n = x.shape[0]
    scores = [sum(x[i, s[i]] for i in range(n))
              for s in itertools.permutations(range(n))]
    m = max(scores)
    return float(m + math.log(sum(math.exp(v - m) for v in scores)))


def density_table_exact(x) -> dict[Permutation, float]:
    """Exhaustive table of q(P) proportional to exp of the linear score."""
    x = _square(x)
    n = x.shape[0]
    log_z = log_permanent_exp_by_enumeration(x)
    table = {}
    for s in itertools.permutations(range(1, n + 1)):
        score = sum(x[t, s[t] - 1] for t in range(n))
        table[Permutation(s)] = math.exp(score - log_z)
    return table


def marginals_by_enumeration(x) -> np.ndarray:
    """Entrywise expectation of the permutation matrix under q."""
    x = _square(x)
    n = x.shape[0]
    out = np.zeros((n, n))
    for z, prob in density_table_exact(x).items():
        out[np.arange(n), np.asarray(z.z) - 1] += prob
    return out


def _bethe_objective_value(gamma: np.ndarray, log_a: np.ndarray) -> float:
    # 0 log 0 = 0 at the polytope boundary
    g = gamma
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(g > 0, -g * np.log(g), 0.0)
        rev = np.where(g < 1, (1 - g) * np.log1p(-g), 0.0)
    return float((g * log_a).sum() + ent.sum() + rev.sum())


def bethe_log_permanent_mirror(log_a, iterations: int = 100000,
                               lr: float = 0.2) -> float:
    """Maximize the Bethe objective over doubly stochastic matrices.

    Entropic mirror ascent: multiplicative gradient step, then a
    Sinkhorn re-projection, which is the KL projection back onto the
    polytope.  Independent of the message-passing route.  Runs until
    the projected gradient is tiny (the objective is concave, so that
    certifies the optimum); `iterations` is only a safety cap.

    Trustworthy on moderately conditioned instances; where the optimum
    has entries near the 1e-12 clipping floor the achievable accuracy
    degrades to roughly 1e-4, so comparisons should use benign draws.
    """
    log_a = _square(log_a)
    n = log_a.shape[0]
    if n == 1:
        return float(log_a[0, 0])
    gamma = np.full((n, n), 1.0 / n)
    eps = 1e-12
    for _ in range(iterations):
        g = np.clip(gamma, eps, 1 - eps)
        grad = log_a - np.log(g) - np.log1p(-g) - 2.0
        centered = grad - grad.mean(axis=1, keepdims=True)
        centered -= centered.mean(axis=0, keepdims=True)
        if np.abs(centered).max() <= 1e-9:
            break
        gamma = np.exp(log_sinkhorn(np.log(g) + lr * grad, 30))
    # evaluate at a hard-projected point: near-feasibility inflates the
    # objective above the constrained maximum
    log_g = np.log(np.clip(gamma, eps, None))
    for _ in range(40):
        log_g = log_sinkhorn(log_g, 50)
        b = np.exp(log_g)
        if max(np.abs(b.sum(axis=1) - 1.0).max(),
               np.abs(b.sum(axis=0) - 1.0).max()) <= 1e-13:
            break
    return _bethe_objective_value(np.exp(log_g), log_a)


def replay_log_prob(theta: DecoderParams, ep: Episode, z: Permutation) -> float:
    """Sequential replay of one generation episode, factor by factor.

    Re-derives every step's features and softmaxes from scratch with
    plain per-step numpy, sharing nothing with the one-pass
    teacher-forced evaluation it is meant to check.
    """
    if z.n != len(ep.y):
        raise ValueError("order length does not match target length")
    d = theta.width
    n = len(ep.y)
    if len(ep.x):
        src_mean = theta.emb[list(ep.x), :].mean(axis=0)
    else:
        src_mean = np.zeros(d)
    src = theta.w_src @ src_mean

    total = 0.0
    placed: list[tuple[int, int]] = []  # (position, token), surface order
    for t in range(1, n + 1):
        pos = z.z[t - 1]
        tok = ep.y[pos - 1]
        if t == 1:
            gen_mean = np.zeros(d)
            prev = theta.start_emb
        else:
            gen_mean = np.mean([theta.emb[tk] for _, tk in placed], axis=0)
            prev_pos = z.z[t - 2]
            prev = theta.emb[ep.y[prev_pos - 1]]
        frac = t / n
        feats = np.concatenate([src, gen_mean, prev, [frac], src * frac])

        logits = theta.w_tok @ feats + theta.b_tok
        total += float(logits[tok] - _lse1(logits))

        wc = theta.w_slot + theta.w_cross @ np.concatenate([theta.emb[tok], feats])
        slot_logits = []
        for j in range(len(placed) + 1):
            left = theta.bound_left if j == 0 else theta.emb[placed[j - 1][1]]
            right = theta.bound_right if j == len(placed) else theta.emb[placed[j][1]]
            slot_logits.append(float(np.concatenate([left, right]) @ wc))
        slot_logits = np.asarray(slot_logits)
        r = bisect_left([p for p, _ in placed], pos)
        total += float(slot_logits[r] - _lse1(slot_logits))
        placed.insert(r, (pos, tok))
    return total


def _lse1(v: np.ndarray) -> float:
    m = float(v.max())
    return m + math.log(np.exp(v - m).sum())


def levenshtein_by_matrix(a: Sequence[int], b: Sequence[int]) -> int:
    """Full-matrix edit-distance DP, kept independent of the two-row one."""
    la, lb = len(a), len(b)
    dp = np.zeros((la + 1, lb + 1), dtype=np.int64)
    dp[:, 0] = np.arange(la + 1)
    dp[0, :] = np.arange(lb + 1)
    for i in range(1, la + 1):
        for j in range(1, lb + 1):
            dp[i, j] = min(
                dp[i - 1, j] + 1,
                dp[i, j - 1] + 1,
                dp[i - 1, j - 1] + (a[i - 1] != b[j - 1]),
            )
    return int(dp[la, lb])


def rank_correlation_by_covariance(z1: Permutation, z2: Permutation) -> float:
    """Rank correlation from the covariance of the two step vectors."""
    if z1.n != z2.n:
        raise ValueError("orders must have equal length")
    a = np.asarray(z1.z, dtype=float)
    b = np.asarray(z2.z, dtype=float)
    a -= a.mean()
    b -= b.mean()
    return float((a * b).sum() / math.sqrt((a * a).sum() * (b * b).sum()))


def expected_phi_gradient(xs: np.ndarray, reward: dict[Permutation, float],
                          beta: float) -> np.ndarray:
    """Exact E[(f(z) - beta log q(z) - E[...]) grad log q(z)] by enumeration.

    The baseline subtracts the exact expectation of the bracket, which
    is the variance-minimizing constant control variate; matches the
    large-K limit of the per-episode mean baseline.
    """
    table = density_table_exact(xs)
    marg = marginals_by_enumeration(xs)
    mean_bracket = sum(prob * (reward[z] - beta * math.log(prob))
                      for z, prob in table.items())
    grad = np.zeros_like(np.asarray(xs, dtype=float))
    n = grad.shape[0]
    for z, prob in table.items():
        bracket = reward[z] - beta * math.log(prob) - mean_bracket
        glogq = -marg.copy()
        glogq[np.arange(n), np.asarray(z.z) - 1] += 1.0
        grad += prob * bracket * glogq
    return grad


def score_function_residual(x) -> float:
    """Max abs entry of sum_P q(P) grad log q(P); zero in exact arithmetic."""
    x = _square(x)
    n = x.shape[0]
    marg = marginals_by_enumeration(x)
    acc = np.zeros((n, n))
    for z, prob in density_table_exact(x).items():
        g = -marg.copy()
        g[np.arange(n), np.asarray(z.z) - 1] += 1.0
        acc += prob * g
    return float(np.abs(acc).max())
