"""Distributions over generation orders used as the inference policy.

Two families share one interface:

* gumbel_matching: scores are an n x n matrix x; sampling perturbs x
  with Gumbel noise, Sinkhorn-normalizes at temperature tau, and rounds
  to the nearest permutation with the Hungarian solver.  The density is
  modeled as q(P) proportional to exp(<x, P>), normalized by the
  permanent of exp(x) (exact for small n, Bethe otherwise).
* plackett_luce: scores are a length-n vector; positions are drawn
  sequentially without replacement with probability proportional to
  exp(score), equivalently a Gumbel-perturbed argsort.

Densities attach to every sample so downstream consumers never pay for
a second normalizer evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.special import logsumexp

from .assignment import hungarian_max
from .permanent import bethe_log_permanent_exp, exact_marginals_exp, log_permanent_exp
from .permutations import Permutation, from_matrix, matrix_score, to_matrix
from .seeding import substream
from .sinkhorn import SinkhornConfig, gumbel_noise, sample_gumbel_sinkhorn


@dataclass(frozen=True, eq=False)
class GumbelMatchingOrder:
    """Matching-family order distribution with cached normalizer.

    The log normalizer and the edge marginals (Bethe beliefs, or exact
    minor-permanent marginals in exact mode) are computed once at
    construction; per-sample density evaluations are then O(n).
    """

    scores: np.ndarray
    tau: float = 1.0
    sinkhorn_iterations: int = 200
    density_mode: str = "bethe"
    log_normalizer: float = field(init=False)
    marginals: np.ndarray = field(init=False)

    kind = "gumbel_matching"

    def __post_init__(self) -> None:
        x = np.asarray(self.scores, dtype=float)
        if x.ndim != 2 or x.shape[0] != x.shape[1] or x.shape[0] == 0:
            raise ValueError(f"expected square score matrix, got shape {x.shape}")
        if not np.isfinite(x).all():
            raise ValueError("scores must be finite")
        if not (self.tau > 0 and np.isfinite(self.tau)):
            raise ValueError(f"tau must be positive, got {self.tau}")
        x.setflags(write=False)
        object.__setattr__(self, "scores", x)
        if self.density_mode == "exact":
            logz = log_permanent_exp(x)
            marg = exact_marginals_exp(x)
        elif self.density_mode == "bethe":
            res = bethe_log_permanent_exp(x)
            logz, marg = res.log_value, res.gamma
        else:
            raise ValueError(f"unknown density mode: {self.density_mode!r}")
        object.__setattr__(self, "log_normalizer", float(logz))
        object.__setattr__(self, "marginals", marg)

    @property
    def n(self) -> int:
        return self.scores.shape[0]


@dataclass(frozen=True, eq=False)
class PlackettLuceOrder:
    """Sequential-choice order distribution over absolute positions."""

    scores: np.ndarray

    kind = "plackett_luce"

    def __post_init__(self) -> None:
        s = np.asarray(self.scores, dtype=float)
        if s.ndim != 1 or s.shape[0] == 0:
            raise ValueError(f"expected nonempty score vector, got shape {s.shape}")
        if not np.isfinite(s).all():
            raise ValueError("scores must be finite")
        s.setflags(write=False)
        object.__setattr__(self, "scores", s)

    @property
    def n(self) -> int:
        return self.scores.shape[0]


OrderDistribution = Union[GumbelMatchingOrder, PlackettLuceOrder]


def log_density(d: OrderDistribution, z: Permutation) -> float:
    """Log probability of a full order under the distribution."""
    if z.n != d.n:
        raise ValueError(f"order length {z.n} does not match distribution n={d.n}")
    if isinstance(d, GumbelMatchingOrder):
        return matrix_score(d.scores, z) - d.log_normalizer
    remaining = np.ones(d.n, dtype=bool)
    total = 0.0
    for pos in z.z:
        total += float(d.scores[pos - 1] - logsumexp(d.scores[remaining]))
        remaining[pos - 1] = False
    return total


def sample(d: OrderDistribution, count: int, seed: int) -> list[tuple[Permutation, float]]:
    """Draw orders with their log densities attached.

    Sample k is a function of (seed, k) only, so draws are reproducible
    and order-independent.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    out: list[tuple[Permutation, float]] = []
    if isinstance(d, GumbelMatchingOrder):
        cfg = SinkhornConfig(tau=d.tau, iterations=d.sinkhorn_iterations, seed=seed)
        for b in sample_gumbel_sinkhorn(d.scores, cfg, count):
            # round on log probabilities: Sinkhorn only ever adds row
            # and column potentials to the perturbed scores, which
            # shift every permutation's assignment score equally, so
            # the log-domain argmax is exact even when the iterate is
            # far from doubly stochastic (sharp scores, small tau).
            # The floor merely guards exp underflow.
            lb = np.log(np.maximum(b.b, np.finfo(float).tiny))
            z = from_matrix(hungarian_max(lb, ties="any"))
            out.append((z, log_density(d, z)))
        return out
    for k in range(count):
        rng = substream(seed, "gumbel", k)
        noisy = d.scores + gumbel_noise(d.scores.shape, rng)
        order = np.argsort(-noisy, kind="stable")
        z = Permutation(tuple(int(p) + 1 for p in order))
        out.append((z, log_density(d, z)))
    return out


def grad_log_density(d: OrderDistribution, z: Permutation) -> np.ndarray:
    """Gradient of log_density in the distribution's scores.

    gumbel_matching: P - marginals, an (n, n) matrix (Bethe beliefs in
    bethe mode, so the cached approximation and its gradient agree).
    plackett_luce: per-position indicator minus the sum of softmax
    weights over the steps at which the position was still available.
    """
    if z.n != d.n:
        raise ValueError(f"order length {z.n} does not match distribution n={d.n}")
    if isinstance(d, GumbelMatchingOrder):
        return to_matrix(z).p.astype(float) - d.marginals
    grad = np.zeros(d.n)
    remaining = np.ones(d.n, dtype=bool)
    for pos in z.z:
        grad[pos - 1] += 1.0
        weights = np.exp(d.scores[remaining] - logsumexp(d.scores[remaining]))
        grad[remaining] -= weights
        remaining[pos - 1] = False
    return grad


def entropy_estimate(d: OrderDistribution, samples: Sequence[Permutation | tuple[Permutation, float]]) -> float:
    """Plug-in entropy estimate: minus the mean sample log density."""
    if len(samples) == 0:
        raise ValueError("entropy estimate needs at least one sample")
    total = 0.0
    for s in samples:
        z = s[0] if isinstance(s, tuple) else s
        total += log_density(d, z)
    return -total / len(samples)
