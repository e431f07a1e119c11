"""Order encoder: per-position priorities under a learned step ramp.

Position p of the target is scored for generation step t as
X[t, p] = ramp_t * s_p, a per-position priority modulated by a linear
ramp over steps.  Under the matching density q(P) proportional to
exp<X, P> the mode sorts positions by priority (rearrangement
inequality), so one priority vector drives both latent families: the
matrix form feeds Gumbel-Sinkhorn sampling, the vector form is the
Plackett-Luce score.

Priorities are log-linear in the token embedding, its interaction with
a mapped source summary, and the relative position, which is enough to
express frequency-keyed, content-keyed, and positional orders.  Source
positions can be masked (their embeddings zeroed) for perturbation
studies; the summary mean keeps the full-length denominator so masking
is a feature removal, not a reweighting.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .assignment import hungarian_max
from .corpus import Episode
from .permutations import Permutation, from_matrix


@dataclass(frozen=True, eq=False)
class EncoderParams:
    """Parameter bundle for the priority encoder.

    Shapes, with V tokens and width d: emb (V, d), w_src (d, d),
    w_prio (d,), w_int (d,), w_posn (1,), ramp (2,).
    """

    emb: np.ndarray
    w_src: np.ndarray
    w_prio: np.ndarray
    w_int: np.ndarray
    w_posn: np.ndarray
    ramp: np.ndarray

    def __post_init__(self) -> None:
        for f in fields(self):
            arr = np.asarray(getattr(self, f.name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, f.name, arr)
        v, d = self.emb.shape
        expect = {
            "w_src": (d, d), "w_prio": (d,), "w_int": (d,),
            "w_posn": (1,), "ramp": (2,),
        }
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        for f in fields(self):
            if not np.isfinite(getattr(self, f.name)).all():
                raise ValueError(f"{f.name} must be finite")

    @property
    def vocab_size(self) -> int:
        return self.emb.shape[0]

    @property
    def width(self) -> int:
        return self.emb.shape[1]

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_arrays(cls, arrays: dict) -> "EncoderParams":
        return cls(**{f.name: np.asarray(arrays[f.name], dtype=float) for f in fields(cls)})


def init_encoder(vocab_size: int, width: int, seed: int, scale: float = 0.1) -> EncoderParams:
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xE4C0DE)))
    return EncoderParams(
        emb=rng.normal(scale=scale, size=(vocab_size, width)),
        w_src=rng.normal(scale=scale, size=(width, width)),
        w_prio=rng.normal(scale=scale, size=width),
        w_int=rng.normal(scale=scale, size=width),
        w_posn=np.zeros(1),
        # decreasing positive ramp: highest priority claims the first step,
        # matching the Plackett-Luce convention of sampling high scores first
        ramp=np.array([1.0, -0.5]),
    )


def encoder_zeros_like(phi: EncoderParams) -> dict[str, np.ndarray]:
    return {f.name: np.zeros_like(getattr(phi, f.name)) for f in fields(EncoderParams)}


def encoder_axpy(alpha: float, grad: dict[str, np.ndarray], phi: EncoderParams) -> EncoderParams:
    return EncoderParams(**{
        f.name: getattr(phi, f.name) + alpha * grad[f.name] for f in fields(EncoderParams)
    })


def encoder_grad_norm(grad: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((a * a).sum()) for a in grad.values())))


def flatten_encoder(phi: EncoderParams) -> np.ndarray:
    return np.concatenate([getattr(phi, f.name).ravel() for f in fields(EncoderParams)])


def unflatten_encoder(phi: EncoderParams, vec: np.ndarray) -> EncoderParams:
    out = {}
    at = 0
    for f in fields(EncoderParams):
        arr = getattr(phi, f.name)
        out[f.name] = vec[at:at + arr.size].reshape(arr.shape)
        at += arr.size
    return EncoderParams(**out)


def _check_episode(phi: EncoderParams, ep: Episode) -> None:
    top = phi.vocab_size
    if any(not 0 <= t < top for t in ep.x + ep.y):
        raise ValueError("token id outside vocabulary")


def _fractions(n: int) -> np.ndarray:
    return np.arange(n) / max(n - 1, 1)


def _masked_source_mean(phi: EncoderParams, x: Sequence[int],
                        masked: frozenset[int]) -> np.ndarray:
    if len(x) == 0:
        return np.zeros(phi.width)
    embs = phi.emb[list(x), :]
    if masked:
        embs = embs.copy()
        embs[[i for i in masked if 0 <= i < len(x)], :] = 0.0
    return embs.mean(axis=0)


def _forward(phi: EncoderParams, ep: Episode, masked: frozenset[int]):
    _check_episode(phi, ep)
    e = phi.emb[list(ep.y), :]
    src_mean = _masked_source_mean(phi, ep.x, masked)
    h = phi.w_src @ src_mean
    frac = _fractions(len(ep.y))
    s = e @ phi.w_prio + (e * h) @ phi.w_int + phi.w_posn[0] * frac
    return s, e, h, src_mean, frac


def encoder_priorities(phi: EncoderParams, ep: Episode,
                       masked: frozenset[int] = frozenset()) -> np.ndarray:
    """Priority vector s over target positions; Plackett-Luce scores."""
    s, *_ = _forward(phi, ep, masked)
    return s


def encoder_matrix(phi: EncoderParams, ep: Episode,
                   masked: frozenset[int] = frozenset()) -> np.ndarray:
    """Score matrix X with X[t, p] = ramp_t * s_p (step t, position p)."""
    s, _, _, _, frac = _forward(phi, ep, masked)
    ramp = phi.ramp[0] + phi.ramp[1] * frac
    return np.outer(ramp, s)


def _backprop_s(phi: EncoderParams, ep: Episode, ds: np.ndarray, e: np.ndarray,
                h: np.ndarray, src_mean: np.ndarray, frac: np.ndarray,
                masked: frozenset[int], grads: dict[str, np.ndarray]) -> None:
    grads["w_prio"] += e.T @ ds
    grads["w_int"] += (e * h).T @ ds
    grads["w_posn"][0] += float(ds @ frac)
    np.add.at(grads["emb"], list(ep.y), ds[:, None] * (phi.w_prio + phi.w_int * h)[None, :])
    dh = phi.w_int * (ds @ e)
    grads["w_src"] += np.outer(dh, src_mean)
    if len(ep.x):
        d_mean = (phi.w_src.T @ dh) / len(ep.x)
        live = [i for i in range(len(ep.x)) if i not in masked]
        if live:
            np.add.at(grads["emb"], [ep.x[i] for i in live],
                      np.broadcast_to(d_mean, (len(live), phi.width)))


def encoder_backprop_priorities(phi: EncoderParams, ep: Episode, ds: np.ndarray,
                                masked: frozenset[int] = frozenset()) -> dict[str, np.ndarray]:
    """Parameter gradients of ds . s for a downstream cotangent ds."""
    _, e, h, src_mean, frac = _forward(phi, ep, masked)
    ds = np.asarray(ds, dtype=float)
    if ds.shape != (len(ep.y),):
        raise ValueError(f"cotangent has shape {ds.shape}, expected ({len(ep.y)},)")
    grads = encoder_zeros_like(phi)
    _backprop_s(phi, ep, ds, e, h, src_mean, frac, masked, grads)
    return grads


def encoder_backprop_matrix(phi: EncoderParams, ep: Episode, dx: np.ndarray,
                            masked: frozenset[int] = frozenset()) -> dict[str, np.ndarray]:
    """Parameter gradients of <dx, X> for a downstream cotangent dx."""
    s, e, h, src_mean, frac = _forward(phi, ep, masked)
    n = len(ep.y)
    dx = np.asarray(dx, dtype=float)
    if dx.shape != (n, n):
        raise ValueError(f"cotangent has shape {dx.shape}, expected ({n}, {n})")
    ramp = phi.ramp[0] + phi.ramp[1] * frac
    grads = encoder_zeros_like(phi)
    dx_s = dx @ s
    grads["ramp"][0] += float(dx_s.sum())
    grads["ramp"][1] += float(frac @ dx_s)
    _backprop_s(phi, ep, ramp @ dx, e, h, src_mean, frac, masked, grads)
    return grads


def modal_order(phi: EncoderParams, ep: Episode, kind: str = "gumbel_matching",
                masked: frozenset[int] = frozenset()) -> Permutation:
    """Most likely order under the zero-temperature limit of the family."""
    if kind == "gumbel_matching":
        return from_matrix(hungarian_max(encoder_matrix(phi, ep, masked)))
    if kind == "plackett_luce":
        s = encoder_priorities(phi, ep, masked)
        order = np.argsort(-s, kind="stable")
        return Permutation(tuple(int(i) + 1 for i in order))
    raise ValueError(f"unknown distribution kind: {kind!r}")
