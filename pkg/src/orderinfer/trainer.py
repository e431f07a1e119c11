"""Policy-gradient training of the order encoder against the decoder.

One step draws K latent orders per episode from the encoder's
distribution, teacher-forces the decoder at each order for the reward
log p(y, z | x), and ascends both parameter sets:

    g_theta = (1/NK) sum_i grad log p(y, z_i | x)
    g_phi   = (1/NK) sum_i A_i * grad log q(z_i),
    A_i     = log p(y, z_i | x) - baseline - beta * log q(z_i)

with the baseline the per-episode mean reward over the K draws and an
annealed entropy bonus entering through the -beta log q term.  Order
recovery runs in two phases: overfit the decoder at the planted orders,
then freeze it and train the encoder alone, scoring the modal order
against the plant.

Rewards are teacher-forced on end-augmented episodes (the end token
appended as a final rightmost step) so the frozen decoder also prices
stopping, which is what lets greedy decoding terminate correctly.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from statistics import fmean
from typing import Callable, Sequence

import numpy as np

from .assignment import hungarian_max
from .corpus import Corpus, Episode, planted_order
from .decoder import (DecoderParams, decoder_axpy, decoder_zeros_like, decode,
                      grad_norm, init_decoder, joint_log_prob,
                      joint_log_prob_and_grad, with_end_step)
from .distributions import PlackettLuceOrder, grad_log_density, log_density
from .encoder import (EncoderParams, encoder_axpy, encoder_backprop_matrix,
                      encoder_backprop_priorities, encoder_grad_norm,
                      encoder_matrix, encoder_priorities, encoder_zeros_like,
                      init_encoder, modal_order)
from .metrics import nld
from .permanent import bethe_many, exact_marginals_exp, log_permanent_exp
from .permutations import Permutation, all_permutations, from_matrix, matrix_score
from .seeding import substream
from .sinkhorn import gumbel_noise, log_sinkhorn

DISTRIBUTIONS = ("gumbel_matching", "plackett_luce")
SAMPLERS = ("gumbel", "exact")
DENSITY_MODES = ("bethe", "exact")
EXACT_SAMPLER_MAX_N = 8

# Bethe settings for the inner training loop; tighter defaults live in
# the permanent module for standalone evaluation
_BETHE_ITERS = 300
_BETHE_TOL = 1e-6
_BETHE_POLISH = 15


class NonFiniteGradientError(RuntimeError):
    """A gradient accumulation produced NaN or infinity; no update applied."""


class Phase1OverfitError(RuntimeError):
    """The decoder failed to reproduce every episode at the planted orders."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for policy-gradient order inference.

    beta follows a log-linear schedule from beta_start to beta_end over
    beta_steps, then stays at beta_end.
    """

    k: int = 4
    beta_start: float = 0.5
    beta_end: float = 0.05
    beta_steps: int = 2000
    lr_theta: float = 0.5
    lr_phi: float = 0.05
    theta_clip: float = 10.0
    phi_clip: float = 2.0
    tau: float = 1.0
    sinkhorn_iterations: int = 60
    batch_size: int = 16
    seed: int = 0
    total_steps: int = 4000
    distribution: str = "gumbel_matching"
    density_mode: str = "bethe"
    sampler: str = "gumbel"
    decoder_width: int = 24
    encoder_width: int = 16
    phase1_steps: int = 10000
    phase1_lr: float = 2.0
    phase1_clip: float = 0.5
    phase2_check_every: int = 200
    phase2_patience: int = 5

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        for name in ("lr_theta", "lr_phi", "theta_clip", "phi_clip", "tau",
                     "phase1_lr", "phase1_clip"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.beta_start < 0 or self.beta_end < 0:
            raise ValueError("beta must be non-negative")
        if self.beta_start != self.beta_end:
            if self.beta_start == 0 or self.beta_end == 0:
                raise ValueError("log-linear schedule endpoints must both be positive")
            if self.beta_steps < 2:
                raise ValueError("a non-constant schedule needs beta_steps >= 2")
        for name in ("sinkhorn_iterations", "batch_size", "beta_steps",
                     "decoder_width", "encoder_width", "phase1_steps",
                     "phase2_check_every", "phase2_patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.total_steps < 0:
            raise ValueError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"unknown distribution: {self.distribution!r}")
        if self.density_mode not in DENSITY_MODES:
            raise ValueError(f"unknown density mode: {self.density_mode!r}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler: {self.sampler!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class StepReport:
    """Per-step training diagnostics."""

    step: int
    elbo: float
    log_p: float
    log_q: float
    entropy: float
    baseline: float
    beta: float
    grad_theta_norm: float
    grad_phi_norm: float


@dataclass
class TrainState:
    """Mutable caches threaded through consecutive train_step calls.

    The reward cache is consulted only while the decoder is frozen; the
    message cache warm-starts the Bethe fixed point per episode.
    """

    reward_cache: dict = field(default_factory=dict)
    bethe_messages: dict = field(default_factory=dict)


def anneal_beta(cfg: TrainConfig, step_index: int) -> float:
    """Entropy coefficient at a step: log-linear decay, then flat."""
    if step_index < 0:
        raise ValueError(f"step_index must be >= 0, got {step_index}")
    if cfg.beta_start == cfg.beta_end:
        return cfg.beta_start
    i = min(step_index, cfg.beta_steps - 1)
    frac = i / (cfg.beta_steps - 1)
    return float(cfg.beta_start * (cfg.beta_end / cfg.beta_start) ** frac)


def baseline(log_ps: Sequence[float]) -> float:
    """Arithmetic mean of the K sample rewards."""
    if len(log_ps) == 0:
        raise ValueError("baseline needs at least one reward")
    return fmean(log_ps)


def _gm_draws(
    phi: EncoderParams,
    batch: Sequence[Episode],
    cfg: TrainConfig,
    step_index: int,
    state: TrainState | None,
) -> list[tuple[np.ndarray, list[Permutation], np.ndarray, np.ndarray]]:
    """Per episode: (X, K orders, K log densities, marginals)."""
    xs = [encoder_matrix(phi, ep) for ep in batch]
    if not all(np.isfinite(x).all() for x in xs):
        raise NonFiniteGradientError("encoder produced non-finite score matrices")
    out: list = [None] * len(batch)
    if cfg.sampler == "exact":
        for ep_idx, (ep, x) in enumerate(zip(batch, xs)):
            n = len(ep.y)
            if n > EXACT_SAMPLER_MAX_N:
                raise ValueError(f"exact sampler limited to n <= {EXACT_SAMPLER_MAX_N}, got {n}")
            perms = list(all_permutations(n))
            logz = log_permanent_exp(x)
            logqs = np.array([matrix_score(x, z) for z in perms]) - logz
            probs = np.exp(logqs)
            probs /= probs.sum()
            rng = substream(cfg.seed, "exactsample", step_index, ep_idx)
            picks = rng.choice(len(perms), size=cfg.k, p=probs)
            zs = [perms[i] for i in picks]
            marg = (exact_marginals_exp(x) if cfg.density_mode == "exact"
                    else _bethe_for(ep, x, state)[1])
            if cfg.density_mode == "exact":
                lq = logqs[picks]
            else:
                lv = _bethe_for(ep, x, state)[0]
                lq = np.array([matrix_score(x, z) for z in zs]) - lv
            out[ep_idx] = (x, zs, lq, marg)
        return out

    # group equal-length episodes so Sinkhorn and Bethe run batched
    groups: dict[int, list[int]] = {}
    for ep_idx, ep in enumerate(batch):
        groups.setdefault(len(ep.y), []).append(ep_idx)
    for n in sorted(groups):
        members = groups[n]
        noisy = np.empty((len(members), cfg.k, n, n))
        for slot, ep_idx in enumerate(members):
            rng = substream(cfg.seed, "gumbel", step_index, ep_idx)
            noisy[slot] = (xs[ep_idx][None] + gumbel_noise((cfg.k, n, n), rng)) / cfg.tau
        # rounding happens on the log-domain iterate: every Sinkhorn
        # step adds row/col potentials, which shift all permutations'
        # assignment scores equally, so the rounded sample is exact no
        # matter how under-converged the iterate is.  Rounding exp(.)
        # instead breaks badly for sharp scores, where unnormalized row
        # scales differ by orders of magnitude.
        soft_log = log_sinkhorn(noisy, cfg.sinkhorn_iterations)
        if cfg.density_mode == "exact":
            stats = [(log_permanent_exp(xs[i]), exact_marginals_exp(xs[i])) for i in members]
        else:
            stats = _bethe_group([batch[i] for i in members],
                                 np.stack([xs[i] for i in members]), state)
        for slot, ep_idx in enumerate(members):
            zs = [from_matrix(hungarian_max(soft_log[slot, i], ties="any")) for i in range(cfg.k)]
            logz, marg = stats[slot]
            lq = np.array([matrix_score(xs[ep_idx], z) for z in zs]) - logz
            out[ep_idx] = (xs[ep_idx], zs, lq, marg)
    return out


def _bethe_for(ep: Episode, x: np.ndarray, state: TrainState | None):
    [(logz, marg)] = _bethe_group([ep], x[None], state)
    return logz, marg


def _bethe_group(eps: Sequence[Episode], x_stack: np.ndarray,
                 state: TrainState | None) -> list[tuple[float, np.ndarray]]:
    msgs = None
    if state is not None and all(ep in state.bethe_messages for ep in eps):
        msgs = (np.stack([state.bethe_messages[ep][0] for ep in eps]),
                np.stack([state.bethe_messages[ep][1] for ep in eps]))
    logz, gammas, _, msgs_out = bethe_many(
        x_stack, max_iters=_BETHE_ITERS, tol=_BETHE_TOL,
        messages=msgs, polish_iterations=_BETHE_POLISH)
    if state is not None:
        for i, ep in enumerate(eps):
            state.bethe_messages[ep] = (msgs_out[0][i], msgs_out[1][i])
    return [(float(logz[i]), gammas[i]) for i in range(len(eps))]


def _pl_draws(
    phi: EncoderParams,
    batch: Sequence[Episode],
    cfg: TrainConfig,
    step_index: int,
) -> list[tuple[PlackettLuceOrder, list[Permutation], np.ndarray]]:
    out = []
    for ep_idx, ep in enumerate(batch):
        d = PlackettLuceOrder(encoder_priorities(phi, ep))
        n = d.n
        if cfg.sampler == "exact":
            perms = list(all_permutations(n))
            logqs = np.array([log_density(d, z) for z in perms])
            probs = np.exp(logqs)
            probs /= probs.sum()
            rng = substream(cfg.seed, "exactsample", step_index, ep_idx)
            picks = rng.choice(len(perms), size=cfg.k, p=probs)
            zs = [perms[i] for i in picks]
            lq = logqs[picks]
        else:
            rng = substream(cfg.seed, "gumbel", step_index, ep_idx)
            noise = gumbel_noise((cfg.k, n), rng)
            zs = []
            for i in range(cfg.k):
                order = np.argsort(-(d.scores + noise[i]), kind="stable")
                zs.append(Permutation(tuple(int(p) + 1 for p in order)))
            lq = np.array([log_density(d, z) for z in zs])
        out.append((d, zs, lq))
    return out


def _reward(theta: DecoderParams, ep: Episode, z: Permutation, end_id: int | None,
            cache: dict | None, need_grad: bool):
    aug_ep, aug_z = (ep, z) if end_id is None else with_end_step(ep, z, end_id)
    if need_grad:
        return joint_log_prob_and_grad(theta, aug_ep, aug_z)
    if cache is not None:
        key = (ep, z.z)
        hit = cache.get(key)
        if hit is None:
            hit = joint_log_prob(theta, aug_ep, aug_z)
            cache[key] = hit
        return hit, None
    return joint_log_prob(theta, aug_ep, aug_z), None


def train_step(
    theta: DecoderParams,
    phi: EncoderParams,
    batch: Sequence[Episode],
    cfg: TrainConfig,
    step_index: int,
    end_id: int | None = None,
    freeze_theta: bool = False,
    state: TrainState | None = None,
) -> tuple[DecoderParams, EncoderParams, StepReport]:
    """One joint ascent step over a batch of episodes.

    With freeze_theta the decoder is returned untouched (the same
    object) and rewards may be served from the state's cache, which is
    valid precisely because the decoder is not moving.
    """
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    beta = anneal_beta(cfg, step_index)
    nk = len(batch) * cfg.k
    g_theta = None if freeze_theta else decoder_zeros_like(theta)
    g_phi = encoder_zeros_like(phi)
    cache = state.reward_cache if (state is not None and freeze_theta) else None

    if cfg.distribution == "gumbel_matching":
        draws = _gm_draws(phi, batch, cfg, step_index, state)
    else:
        draws = _pl_draws(phi, batch, cfg, step_index)

    sum_logp = 0.0
    sum_logq = 0.0
    sum_base = 0.0
    for ep_idx, ep in enumerate(batch):
        n = len(ep.y)
        if cfg.distribution == "gumbel_matching":
            x, zs, lq, marg = draws[ep_idx]
        else:
            d, zs, lq = draws[ep_idx]
        rewards = []
        for z in zs:
            lp, g = _reward(theta, ep, z, end_id, cache, need_grad=g_theta is not None)
            rewards.append(lp)
            if g is not None:
                for name, arr in g.items():
                    g_theta[name] += arr / nk
        base = baseline(rewards)
        adv = (np.asarray(rewards) - base - beta * lq) / nk
        if cfg.distribution == "gumbel_matching":
            dx = np.zeros((n, n))
            rows = np.arange(n)
            for a_i, z in zip(adv, zs):
                dx[rows, np.asarray(z.z) - 1] += a_i
            dx -= adv.sum() * marg
            acc = encoder_backprop_matrix(phi, ep, dx)
        else:
            ds = np.zeros(n)
            for a_i, z in zip(adv, zs):
                ds += a_i * grad_log_density(d, z)
            acc = encoder_backprop_priorities(phi, ep, ds)
        for name, arr in acc.items():
            g_phi[name] += arr
        sum_logp += sum(rewards)
        sum_logq += float(lq.sum())
        sum_base += base

    scalars_ok = all(math.isfinite(v) for v in (sum_logp, sum_logq, beta))
    grads_ok = all(np.isfinite(a).all() for a in g_phi.values())
    if g_theta is not None:
        grads_ok = grads_ok and all(np.isfinite(a).all() for a in g_theta.values())
    if not (scalars_ok and grads_ok):
        raise NonFiniteGradientError(
            f"non-finite gradient at step {step_index}; parameters left unchanged")

    # stateless norm clipping; inactive on well-scaled gradients so the
    # estimator stays an unbiased plain-ascent step there, but long
    # episodes produce advantages large enough to blow up the encoder
    if g_theta is None:
        theta_next = theta
    else:
        tn = grad_norm(g_theta)
        t_scale = cfg.lr_theta * min(1.0, cfg.theta_clip / tn) if tn > 0 else cfg.lr_theta
        theta_next = decoder_axpy(t_scale, g_theta, theta)
    pn = encoder_grad_norm(g_phi)
    p_scale = cfg.lr_phi * min(1.0, cfg.phi_clip / pn) if pn > 0 else cfg.lr_phi
    phi_next = encoder_axpy(p_scale, g_phi, phi)
    mean_logp = float(sum_logp / nk)
    mean_logq = float(sum_logq / nk)
    report = StepReport(
        step=step_index,
        elbo=mean_logp - beta * mean_logq,
        log_p=mean_logp,
        log_q=mean_logq,
        entropy=-mean_logq,
        baseline=float(sum_base / len(batch)),
        beta=beta,
        grad_theta_norm=0.0 if g_theta is None else grad_norm(g_theta),
        grad_phi_norm=encoder_grad_norm(g_phi),
    )
    return theta_next, phi_next, report


@dataclass(frozen=True)
class RecoveryResult:
    """Outcome of the two-phase order-recovery experiment."""

    final_nld: float
    per_episode_nld: tuple[float, ...]
    phase1_steps: int
    phase2_steps: int
    theta: DecoderParams
    phi: EncoderParams


def _generates_all(theta: DecoderParams, corpus: Corpus) -> bool:
    # the step fraction is anticipatory, so reproduction must pass the
    # reference length (plus the end step) as the cap, per episode
    for ep in corpus.episodes:
        cap = len(ep.y) + (0 if corpus.vocab.end_id is None else 1)
        if decode(theta, ep.x, corpus.vocab, beam=1, max_len=cap).y != ep.y:
            return False
    return True


def overfit_decoder(
    corpus: Corpus,
    cfg: TrainConfig,
    theta0: DecoderParams | None = None,
    check_every: int = 50,
) -> tuple[DecoderParams, int]:
    """Phase 1: fit the decoder at the planted orders until it reproduces
    every episode under greedy decoding.  Raises Phase1OverfitError when
    the step budget runs out first."""
    eps = corpus.episodes
    end_id = corpus.vocab.end_id
    pairs = []
    for ep in eps:
        z = planted_order(ep)
        pairs.append((ep, z) if end_id is None else with_end_step(ep, z, end_id))
    theta = theta0 if theta0 is not None else init_decoder(
        corpus.vocab.size, cfg.decoder_width, cfg.seed)
    if _generates_all(theta, corpus):
        return theta, 0
    for step in range(1, cfg.phase1_steps + 1):
        g = decoder_zeros_like(theta)
        for aug_ep, aug_z in pairs:
            _, gi = joint_log_prob_and_grad(theta, aug_ep, aug_z)
            for name, arr in gi.items():
                g[name] += arr / len(pairs)
        if not all(np.isfinite(a).all() for a in g.values()):
            raise NonFiniteGradientError(f"non-finite decoder gradient at phase-1 step {step}")
        # norm clipping keeps the ascent stateless and deterministic
        # while taming the feedback between emb and w_cross
        gn = grad_norm(g)
        scale = cfg.phase1_lr * min(1.0, cfg.phase1_clip / gn) if gn > 0 else cfg.phase1_lr
        theta = decoder_axpy(scale, g, theta)
        if step % check_every == 0 and _generates_all(theta, corpus):
            return theta, step
    if _generates_all(theta, corpus):
        return theta, cfg.phase1_steps
    raise Phase1OverfitError(
        f"decoder failed to reproduce the corpus after {cfg.phase1_steps} steps")


def recover_order_experiment(
    corpus: Corpus,
    cfg: TrainConfig,
    theta0: DecoderParams | None = None,
    report_sink: Callable[[StepReport], None] | None = None,
) -> RecoveryResult:
    """Two-phase order recovery; scores the encoder's modal orders
    against the planted ones by mean normalized Levenshtein distance.

    Phase 2 stops early once the modal orders have been stable for
    phase2_patience consecutive checks.
    """
    eps = corpus.episodes
    for ep in eps:
        if ep.planted_z is None:
            raise ValueError("order recovery needs planted orders on every episode")
    theta, p1_steps = overfit_decoder(corpus, cfg, theta0)
    phi = init_encoder(corpus.vocab.size, cfg.encoder_width, cfg.seed)
    state = TrainState()
    end_id = corpus.vocab.end_id
    n_eps = len(eps)
    take = min(cfg.batch_size, n_eps)
    stable = 0
    last_modal: tuple | None = None
    steps_done = 0
    for step in range(cfg.total_steps):
        picks = substream(cfg.seed, "batch", step).choice(n_eps, size=take, replace=False)
        batch = [eps[i] for i in picks]
        theta2, phi, report = train_step(
            theta, phi, batch, cfg, step, end_id=end_id, freeze_theta=True, state=state)
        assert theta2 is theta
        steps_done = step + 1
        if report_sink is not None:
            report_sink(report)
        if steps_done % cfg.phase2_check_every == 0:
            modal = tuple(modal_order(phi, ep, cfg.distribution).z for ep in eps)
            if modal == last_modal:
                stable += 1
                if stable >= cfg.phase2_patience:
                    break
            else:
                stable = 0
                last_modal = modal
    per_ep = tuple(
        nld(modal_order(phi, ep, cfg.distribution), planted_order(ep)) for ep in eps)
    return RecoveryResult(
        final_nld=fmean(per_ep),
        per_episode_nld=per_ep,
        phase1_steps=p1_steps,
        phase2_steps=steps_done,
        theta=theta,
        phi=phi,
    )


CHECKPOINT_VERSION = "orderinfer-0.1.0"


def save_checkpoint(path, theta: DecoderParams, phi: EncoderParams | None,
                    vocab_size: int, end_id: int | None) -> None:
    """Flat JSON object of named numeric arrays plus version and vocab info."""
    obj: dict = {
        "version": CHECKPOINT_VERSION,
        "vocab_size": int(vocab_size),
        "end_id": None if end_id is None else int(end_id),
    }
    for f in fields(DecoderParams):
        obj[f"decoder.{f.name}"] = getattr(theta, f.name).tolist()
    if phi is not None:
        for f in fields(EncoderParams):
            obj[f"encoder.{f.name}"] = getattr(phi, f.name).tolist()
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True)
        fh.write("\n")


@dataclass(frozen=True)
class Checkpoint:
    theta: DecoderParams
    phi: EncoderParams | None
    vocab_size: int
    end_id: int | None
    version: str


def load_checkpoint(path) -> Checkpoint:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    try:
        theta = DecoderParams(**{
            f.name: np.asarray(obj[f"decoder.{f.name}"], dtype=float)
            for f in fields(DecoderParams)})
        phi = None
        if any(k.startswith("encoder.") for k in obj):
            phi = EncoderParams(**{
                f.name: np.asarray(obj[f"encoder.{f.name}"], dtype=float)
                for f in fields(EncoderParams)})
        return Checkpoint(
            theta=theta,
            phi=phi,
            vocab_size=int(obj["vocab_size"]),
            end_id=None if obj["end_id"] is None else int(obj["end_id"]),
            version=str(obj["version"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed checkpoint {path}: {exc}") from exc
