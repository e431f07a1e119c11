"""Log-space Sinkhorn normalization and Gumbel-perturbed sampling.

One Sinkhorn step divides by column sums, then by row sums; iterating
from exp(x) converges to a doubly stochastic matrix.  All arithmetic
stays in log space (logsumexp subtractions), so large score magnitudes
never overflow.  Temperature scales scores and noise together:
samples are sinkhorn((x + gumbel) / tau).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seeding import substream

# Scores with |x| beyond this are almost certainly a scaling bug
# upstream; refuse rather than silently saturate.
MAX_ABS_SCORE = 1e6

_ONE_BELOW_1 = np.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class SinkhornConfig:
    """Temperature, iteration budget, and base seed for sampling."""

    tau: float
    iterations: int = 200
    seed: int = 0

    def __post_init__(self) -> None:
        if not (self.tau > 0.0 and np.isfinite(self.tau)):
            raise ValueError(f"tau must be positive and finite, got {self.tau}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")


@dataclass(frozen=True, eq=False)
class DoublyStochasticMatrix:
    """Nonnegative square matrix with row and column sums within tol of 1."""

    b: np.ndarray
    tol: float = 1e-6

    def __post_init__(self) -> None:
        b = np.asarray(self.b, dtype=float)
        if b.ndim != 2 or b.shape[0] != b.shape[1] or b.shape[0] == 0:
            raise ValueError(f"expected square matrix, got shape {b.shape}")
        if not np.isfinite(b).all() or (b < 0).any():
            raise ValueError("entries must be finite and nonnegative")
        resid = birkhoff_residual(b)
        if resid > self.tol:
            raise ValueError(f"row/column sums deviate by {resid:.3g} > tol {self.tol:.3g}")
        b.setflags(write=False)
        object.__setattr__(self, "b", b)

    @property
    def n(self) -> int:
        return self.b.shape[0]


def birkhoff_residual(b) -> float:
    """Largest deviation of any row or column sum from 1."""
    b = np.asarray(b, dtype=float)
    row = np.abs(b.sum(axis=1) - 1.0).max()
    col = np.abs(b.sum(axis=0) - 1.0).max()
    return float(max(row, col))


def _validate_scores(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim < 2 or x.shape[-1] != x.shape[-2] or x.shape[-1] == 0:
        raise ValueError(f"expected square score matrix, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("scores must be finite")
    if np.abs(x).max() > MAX_ABS_SCORE:
        raise ValueError(f"score magnitude exceeds clamp {MAX_ABS_SCORE:g}")
    return x


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))


def log_sinkhorn(log_a, iterations: int):
    """Iterate log-space Sinkhorn steps on (..., n, n) log matrices."""
    log_b = np.array(log_a, dtype=float)
    for _ in range(iterations):
        log_b = log_b - _lse(log_b, -2)
        log_b = log_b - _lse(log_b, -1)
    return log_b


def sinkhorn_operator(x, iterations: int = 200) -> DoublyStochasticMatrix:
    """Run `iterations` Sinkhorn steps on exp(x).

    The returned matrix carries the tolerance actually achieved, so an
    under-converged result is still a valid value; callers that need a
    specific tolerance should check ``birkhoff_residual``.
    """
    x = _validate_scores(x)
    if x.ndim != 2:
        raise ValueError("sinkhorn_operator expects a single matrix")
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    b = np.exp(log_sinkhorn(x, iterations))
    resid = birkhoff_residual(b)
    return DoublyStochasticMatrix(b, tol=max(1e-6, resid * (1.0 + 1e-9) + 1e-15))


def gumbel_noise(shape, rng: np.random.Generator) -> np.ndarray:
    """Standard Gumbel draws, -log(-log(u)), with u clamped off {0, 1}."""
    u = rng.random(shape)
    u = np.clip(u, np.finfo(float).tiny, _ONE_BELOW_1)
    return -np.log(-np.log(u))


def sample_gumbel_sinkhorn(x, cfg: SinkhornConfig, count: int) -> list[DoublyStochasticMatrix]:
    """Draw `count` Gumbel-Sinkhorn samples for score matrix x.

    Sample k uses the (seed, "gumbel", k) substream, so individual
    samples are reproducible regardless of count or evaluation order.
    """
    x = _validate_scores(x)
    if x.ndim != 2:
        raise ValueError("sample_gumbel_sinkhorn expects a single matrix")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    noisy = np.stack(
        [(x + gumbel_noise(x.shape, substream(cfg.seed, "gumbel", k))) / cfg.tau for k in range(count)]
    )
    log_b = log_sinkhorn(noisy, cfg.iterations)
    out = []
    for k in range(count):
        b = np.exp(log_b[k])
        resid = birkhoff_residual(b)
        out.append(DoublyStochasticMatrix(b, tol=max(1e-6, resid * (1.0 + 1e-9) + 1e-15)))
    return out
