"""Log-linear insertion decoder: token, then slot, at every step.

Generation is a 2n-step process: at step t the model first emits a
token (conditioned on the source and on everything generated so far),
then picks the slot of the partial output to insert it into
(conditioned additionally on the token it just emitted).  Teacher
forcing at a fixed order z evaluates exactly those 2n softmax factors;
summing exp(joint_log_prob) over all (y, z) therefore gives 1 in the
length-conditioned regime.

Step features are the mapped mean source embedding, the mean embedding
of already-generated tokens, the previous token's embedding, the step
fraction t/n, and the source embedding rescaled by that fraction (the
source-by-step interaction a purely additive head cannot express).  Slot s is scored from its adjacent-token context
(learned boundary vectors at the ends) both directly and through a
bilinear interaction with the just-emitted token and the step features;
slot-invariant inputs enter only through that interaction because any
additive shared term cancels in the slot softmax.

The step fraction is anticipatory: teacher forcing knows the final
length, generation does not, so ``decode`` substitutes its length cap.
Reproduction checks should therefore pass the reference length as
``max_len``.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .corpus import Episode, Vocab
from .permutations import InsertionCode, Permutation, r_to_z, z_to_r

# Teacher-forced evaluation counter, for complexity diagnostics only.
_EVAL_COUNT = 0


def eval_count() -> int:
    return _EVAL_COUNT


def reset_eval_count() -> None:
    global _EVAL_COUNT
    _EVAL_COUNT = 0


@dataclass(frozen=True, eq=False)
class DecoderParams:
    """Log-linear decoder parameter bundle.

    Shapes, with V tokens, width d, and F = 4d + 1 step features:
    emb (V, d), w_src (d, d), w_tok (V, F), b_tok (V,), w_slot (2d,),
    w_cross (2d, d + F), start_emb (d,), bound_left (d,),
    bound_right (d,).
    """

    emb: np.ndarray
    w_src: np.ndarray
    w_tok: np.ndarray
    b_tok: np.ndarray
    w_slot: np.ndarray
    w_cross: np.ndarray
    start_emb: np.ndarray
    bound_left: np.ndarray
    bound_right: np.ndarray

    def __post_init__(self) -> None:
        for f in fields(self):
            arr = np.asarray(getattr(self, f.name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, f.name, arr)
        v, d = self.emb.shape
        feat = 4 * d + 1
        expect = {
            "w_src": (d, d), "w_tok": (v, feat), "b_tok": (v,),
            "w_slot": (2 * d,), "w_cross": (2 * d, d + feat),
            "start_emb": (d,), "bound_left": (d,), "bound_right": (d,),
        }
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def vocab_size(self) -> int:
        return self.emb.shape[0]

    @property
    def width(self) -> int:
        return self.emb.shape[1]

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_arrays(cls, arrays: dict) -> "DecoderParams":
        return cls(**{f.name: np.asarray(arrays[f.name], dtype=float) for f in fields(cls)})


def init_decoder(vocab_size: int, width: int, seed: int, scale: float = 0.1) -> DecoderParams:
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xDEC0DE)))
    d, feat = width, 4 * width + 1
    return DecoderParams(
        emb=rng.normal(scale=scale, size=(vocab_size, d)),
        w_src=rng.normal(scale=scale, size=(d, d)),
        w_tok=rng.normal(scale=scale, size=(vocab_size, feat)),
        b_tok=np.zeros(vocab_size),
        w_slot=rng.normal(scale=scale, size=2 * d),
        w_cross=rng.normal(scale=scale, size=(2 * d, d + feat)),
        start_emb=rng.normal(scale=scale, size=d),
        bound_left=rng.normal(scale=scale, size=d),
        bound_right=rng.normal(scale=scale, size=d),
    )


def decoder_zeros_like(theta: DecoderParams) -> dict[str, np.ndarray]:
    return {f.name: np.zeros_like(getattr(theta, f.name)) for f in fields(DecoderParams)}


def decoder_axpy(alpha: float, grad: dict[str, np.ndarray] | DecoderParams,
                 theta: DecoderParams) -> DecoderParams:
    """theta + alpha * grad, returned as a fresh bundle."""
    g = grad.to_arrays() if isinstance(grad, DecoderParams) else grad
    return DecoderParams(**{
        f.name: getattr(theta, f.name) + alpha * g[f.name] for f in fields(DecoderParams)
    })


def grad_norm(grad: dict[str, np.ndarray] | DecoderParams) -> float:
    g = grad.to_arrays() if isinstance(grad, DecoderParams) else grad
    return float(np.sqrt(sum(float((a * a).sum()) for a in g.values())))


def flatten_params(theta: DecoderParams) -> np.ndarray:
    return np.concatenate([getattr(theta, f.name).ravel() for f in fields(DecoderParams)])


def unflatten_params(theta: DecoderParams, vec: np.ndarray) -> DecoderParams:
    out = {}
    at = 0
    for f in fields(DecoderParams):
        arr = getattr(theta, f.name)
        out[f.name] = vec[at:at + arr.size].reshape(arr.shape)
        at += arr.size
    return DecoderParams(**out)


def with_end_step(ep: Episode, z: Permutation, end_id: int) -> tuple[Episode, Permutation]:
    """Append the end token as a final, rightmost-position generation step.

    Teacher forcing on the augmented pair teaches the model to stop
    after producing the content tokens; the plain episode stays purely
    length-conditioned.
    """
    n = len(ep.y)
    if z.n != n:
        raise ValueError("order length does not match episode")
    return (
        Episode(x=ep.x, y=ep.y + (int(end_id),), tags=None, planted_z=None),
        Permutation(z.z + (n + 1,)),
    )


def _validate_episode(theta: DecoderParams, ep: Episode, z: Permutation) -> None:
    if z.n != len(ep.y):
        raise ValueError(f"order length {z.n} does not match target length {len(ep.y)}")
    top = theta.vocab_size
    if any(not 0 <= t < top for t in ep.x + ep.y):
        raise ValueError("token id outside vocabulary")


def _source_summary(theta: DecoderParams, x: Sequence[int],
                    masked: frozenset[int] = frozenset()) -> tuple[np.ndarray, np.ndarray]:
    d = theta.width
    if len(x) == 0:
        return np.zeros(d), np.zeros(d)
    embs = theta.emb[list(x), :]
    if masked:
        embs = embs.copy()
        embs[[i for i in masked if 0 <= i < len(x)], :] = 0.0
    mean = embs.mean(axis=0)
    return theta.w_src @ mean, mean


def _step_features(theta: DecoderParams, src_sum: np.ndarray, gen_tokens: Sequence[int],
                   t: int, total: int) -> np.ndarray:
    """Features for step t (1-based) of a `total`-step generation."""
    d = theta.width
    if t == 1:
        gen_mean = np.zeros(d)
        prev = theta.start_emb
    else:
        gen_mean = theta.emb[list(gen_tokens[: t - 1]), :].mean(axis=0)
        prev = theta.emb[gen_tokens[t - 2]]
    frac = t / total
    return np.concatenate([src_sum, gen_mean, prev, [frac], src_sum * frac])


def _slot_contexts(theta: DecoderParams, arranged: Sequence[int]) -> np.ndarray:
    """(t, 2d) context matrix for the t slots around t-1 arranged tokens."""
    d = theta.width
    k = len(arranged)
    lefts = np.empty((k + 1, d))
    rights = np.empty((k + 1, d))
    lefts[0] = theta.bound_left
    rights[k] = theta.bound_right
    if k:
        arr = theta.emb[list(arranged), :]
        lefts[1:] = arr
        rights[:k] = arr
    return np.concatenate([lefts, rights], axis=1)


def _forward_backward(theta: DecoderParams, ep: Episode, z: Permutation,
                      need_grad: bool) -> tuple[float, dict[str, np.ndarray] | None]:
    """Teacher-forced log probability and, optionally, its gradient."""
    global _EVAL_COUNT
    _EVAL_COUNT += 1
    _validate_episode(theta, ep, z)
    d = theta.width
    n = len(ep.y)
    gen_tokens = [ep.y[p - 1] for p in z.z]
    slots = z_to_r(z).r
    src_sum, src_mean = _source_summary(theta, ep.x)
    gen_embs = theta.emb[gen_tokens, :]

    # step features, all steps at once; row t-1 must match _step_features
    csum = np.cumsum(gen_embs, axis=0)
    gen_means = np.zeros((n, d))
    if n > 1:
        gen_means[1:] = csum[:-1] / np.arange(1, n)[:, None]
    fracs = np.arange(1, n + 1) / n
    feats = np.concatenate([
        np.broadcast_to(src_sum, (n, d)),
        gen_means,
        np.vstack([theta.start_emb, gen_embs[:-1]]),
        fracs[:, None],
        src_sum[None, :] * fracs[:, None],
    ], axis=1)

    tok_logits = feats @ theta.w_tok.T + theta.b_tok
    tok_max = tok_logits.max(axis=1)
    tok_lse = tok_max + np.log(np.exp(tok_logits - tok_max[:, None]).sum(axis=1))
    total = float(tok_logits[np.arange(n), gen_tokens].sum() - tok_lse.sum())

    grads = decoder_zeros_like(theta) if need_grad else None
    # per-generation-step embedding gradients; scattered into emb once
    # at the end so duplicate token ids never race
    step_emb = np.zeros((n, d)) if need_grad else None
    cbars = np.zeros((n, 2 * d)) if need_grad else None
    d0 = np.zeros(n) if need_grad else None
    dlast = np.zeros(n) if need_grad else None

    u_all = np.concatenate([gen_embs, feats], axis=1)
    wc_all = theta.w_slot + u_all @ theta.w_cross.T  # (n, 2d)

    arranged_steps: list[int] = []
    arranged_pos: list[int] = []
    for t in range(1, n + 1):
        arr = gen_embs[arranged_steps, :]
        ctx = np.empty((t, 2 * d))
        ctx[0, :d] = theta.bound_left
        ctx[1:, :d] = arr
        ctx[:t - 1, d:] = arr
        ctx[t - 1, d:] = theta.bound_right
        wc = wc_all[t - 1]
        slot_logits = ctx @ wc
        m = slot_logits.max()
        lse = m + np.log(np.exp(slot_logits - m).sum())
        slot = slots[t - 1]
        total += float(slot_logits[slot]) - lse
        if need_grad:
            delta = -np.exp(slot_logits - lse)
            delta[slot] += 1.0
            cbars[t - 1] = delta @ ctx
            d0[t - 1] = delta[0]
            dlast[t - 1] = delta[-1]
            if arranged_steps:
                # rows of outer(delta, wc): left context of slot i+1
                # and right context of slot i both read arranged token i
                step_emb[arranged_steps] += (
                    delta[1:, None] * wc[None, :d] + delta[:-1, None] * wc[None, d:])
        pos = z.z[t - 1]
        at = bisect.bisect_left(arranged_pos, pos)
        arranged_pos.insert(at, pos)
        arranged_steps.insert(at, t - 1)

    if not need_grad:
        return total, None

    tok_delta = -np.exp(tok_logits - tok_lse[:, None])
    tok_delta[np.arange(n), gen_tokens] += 1.0
    grads["w_tok"] += tok_delta.T @ feats
    grads["b_tok"] += tok_delta.sum(axis=0)
    feat_grads = tok_delta @ theta.w_tok

    grads["w_slot"] += cbars.sum(axis=0)
    grads["w_cross"] += cbars.T @ u_all
    grads["bound_left"] += d0 @ wc_all[:, :d]
    grads["bound_right"] += dlast @ wc_all[:, d:]
    u_grads = cbars @ theta.w_cross  # (n, d + feat_dim)
    step_emb += u_grads[:, :d]
    feat_grads += u_grads[:, d:]

    # split feature gradients into the source, generated-mean,
    # previous-token, and fraction-scaled source channels; the
    # step-fraction column itself has no parameters behind it
    fracs_col = fracs[:, None]
    fg_src = feat_grads[:, :d].sum(axis=0) + (feat_grads[:, 3 * d + 1:] * fracs_col).sum(axis=0)
    fg_gen = feat_grads[:, d:2 * d]
    fg_prev = feat_grads[:, 2 * d:3 * d]

    grads["w_src"] += np.outer(fg_src, src_mean)
    if len(ep.x):
        per_tok = (theta.w_src.T @ fg_src) / len(ep.x)
        np.add.at(grads["emb"], list(ep.x), np.broadcast_to(per_tok, (len(ep.x), d)))

    # gen_mean at step t averages tokens generated at steps < t
    if n > 1:
        weighted = fg_gen[1:] / np.arange(1, n)[:, None]
        step_emb[:n - 1] += np.cumsum(weighted[::-1], axis=0)[::-1]
        step_emb[:n - 1] += fg_prev[1:]
    grads["start_emb"] += fg_prev[0]
    np.add.at(grads["emb"], gen_tokens, step_emb)
    return total, grads


def joint_log_prob(theta: DecoderParams, ep: Episode, z: Permutation) -> float:
    """Teacher-forced log p(y, z | x): 2n softmax factors in one pass."""
    value, _ = _forward_backward(theta, ep, z, need_grad=False)
    return value


def grad_joint_log_prob(theta: DecoderParams, ep: Episode, z: Permutation) -> dict[str, np.ndarray]:
    """Analytic gradient of joint_log_prob in theta."""
    _, grads = _forward_backward(theta, ep, z, need_grad=True)
    assert grads is not None
    return grads


def joint_log_prob_and_grad(theta: DecoderParams, ep: Episode,
                            z: Permutation) -> tuple[float, dict[str, np.ndarray]]:
    value, grads = _forward_backward(theta, ep, z, need_grad=True)
    assert grads is not None
    return value, grads


@dataclass(frozen=True)
class DecodeResult:
    """Generated target, implied order, score, and per-step trace.

    ``z`` covers the content tokens only; the end emission terminates
    generation, is scored, and is reported via ``stop_reason`` rather
    than as a trace record.
    """

    y: tuple[int, ...]
    z: tuple[int, ...]
    log_prob: float
    trace: tuple[dict, ...]
    stop_reason: str


@dataclass
class _Hyp:
    arranged: tuple[int, ...]
    gen_tokens: tuple[int, ...]
    slots: tuple[int, ...]
    logp: float


def _finish(hyp: _Hyp, logp: float, reason: str) -> DecodeResult:
    if hyp.slots:
        z = r_to_z(InsertionCode(hyp.slots)).z
    else:
        z = ()
    trace = []
    arranged: list[int] = []
    for tok, slot in zip(hyp.gen_tokens, hyp.slots):
        arranged.insert(slot, tok)
        trace.append({"token": int(tok), "slot": int(slot), "partial": list(arranged)})
    return DecodeResult(y=hyp.arranged, z=z, log_prob=logp, trace=tuple(trace),
                        stop_reason=reason)


def _beam_search(theta: DecoderParams, x: Sequence[int], vocab: Vocab, beam: int,
                 max_len: int) -> DecodeResult:
    v = theta.vocab_size
    d = theta.width
    if vocab.size != v:
        raise ValueError(f"vocabulary size {vocab.size} does not match decoder ({v})")
    src_sum, _ = _source_summary(theta, x)
    live = [_Hyp(arranged=(), gen_tokens=(), slots=(), logp=0.0)]
    finished: list[DecodeResult] = []
    for t in range(1, max_len + 1):
        candidates: list[tuple[float, int, int, int]] = []  # (score, hyp_idx, token, slot)
        for hi, hyp in enumerate(live):
            feat = _step_features(theta, src_sum, hyp.gen_tokens, t, max_len)
            tok_logits = theta.w_tok @ feat + theta.b_tok
            tok_lsm = tok_logits - logsumexp(tok_logits)
            ctx = _slot_contexts(theta, hyp.arranged)
            u_all = np.concatenate(
                [theta.emb.T, np.broadcast_to(feat[:, None], (feat.size, v))], axis=0)
            wc_all = theta.w_slot[:, None] + theta.w_cross @ u_all
            slot_logits = ctx @ wc_all  # (t, V)
            slot_lsm = slot_logits - logsumexp(slot_logits, axis=0, keepdims=True)
            scores = hyp.logp + tok_lsm[None, :] + slot_lsm
            flat = scores.ravel()
            keep = min(flat.size, max(beam, 1))
            top = np.argpartition(-flat, keep - 1)[:keep]
            for idx in top:
                slot, token = divmod(int(idx), v)
                candidates.append((float(flat[idx]), hi, token, slot))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2], c[3]))
        next_live: list[_Hyp] = []
        for score, hi, token, slot in candidates:
            if len(next_live) >= beam:
                break
            hyp = live[hi]
            if vocab.end_id is not None and token == vocab.end_id:
                finished.append(_finish(hyp, score, "end_token"))
                continue
            arranged = list(hyp.arranged)
            arranged.insert(slot, token)
            next_live.append(_Hyp(
                arranged=tuple(arranged),
                gen_tokens=hyp.gen_tokens + (token,),
                slots=hyp.slots + (slot,),
                logp=score,
            ))
        live = next_live
        if not live:
            break
    for hyp in live:
        finished.append(_finish(hyp, hyp.logp, "max_len"))
    finished.sort(key=lambda r: -r.log_prob)
    return finished[0]


def decode(theta: DecoderParams, x: Sequence[int], vocab: Vocab, beam: int = 1,
           max_len: int = 32) -> DecodeResult:
    """Beam-search generation; beam=1 is greedy.

    For beam > 1 the greedy result is kept in the candidate pool, so a
    wider beam never returns a worse score than greedy.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    best = _beam_search(theta, x, vocab, beam, max_len)
    if beam > 1:
        greedy = _beam_search(theta, x, vocab, 1, max_len)
        if greedy.log_prob > best.log_prob:
            best = greedy
    return best
