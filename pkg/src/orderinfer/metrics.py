"""Order-analysis metrics and studies.

Distances compare two generation orders of the same sentence: the
normalized Levenshtein distance treats orders as plain integer
sequences, the rank correlation treats them as rankings.  The
generation-index statistics summarize when each token class tends to be
generated, and the perturbation study measures how much the inferred
order moves when parts of the source are masked away.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .corpus import Episode
from .encoder import EncoderParams, modal_order
from .permutations import Permutation


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Edit distance with unit insert/delete/substitute costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(
                prev[j] + 1,
                cur[j - 1] + 1,
                prev[j - 1] + (ca != cb),
            ))
        prev = cur
    return prev[len(b)]


@dataclass(frozen=True)
class OrderPair:
    """Two generation orders of the same sentence."""

    w: Permutation
    z: Permutation

    def __post_init__(self) -> None:
        if self.w.n != self.z.n:
            raise ValueError(f"order lengths differ: {self.w.n} vs {self.z.n}")

    def nld(self) -> float:
        return nld(self.w, self.z)

    def orc(self) -> float:
        return orc(self.w, self.z)


def nld(w: Permutation, z: Permutation) -> float:
    """Levenshtein distance between the order sequences, divided by n.

    Zero exactly when the orders coincide; at most 1.
    """
    if w.n != z.n:
        raise ValueError(f"order lengths differ: {w.n} vs {z.n}")
    return levenshtein(w.z, z.z) / w.n


def orc(w: Permutation, z: Permutation) -> float:
    """Spearman rank correlation between two orders of one sentence.

    1 - 6 sum (w_t - z_t)^2 / (n^3 - n); 1 for equal orders, -1 for a
    reversal.  Undefined at n < 2.
    """
    if w.n != z.n:
        raise ValueError(f"order lengths differ: {w.n} vs {z.n}")
    n = w.n
    if n < 2:
        raise ValueError("rank correlation needs n >= 2")
    d2 = sum((a - b) ** 2 for a, b in zip(w.z, z.z))
    return 1.0 - 6.0 * d2 / (n ** 3 - n)


UNTAGGED = "untagged"


def _as_order(z) -> Permutation:
    return z if isinstance(z, Permutation) else Permutation(tuple(int(v) for v in z))


def generation_index_stats(
    decoded: Iterable[tuple[Sequence[int], Sequence[int] | Permutation, Sequence[str] | None]],
) -> list[dict]:
    """Per-tag normalized generation index summaries.

    Each decoded record is (y, z, tags); the normalized index of the
    token at position p is (step at which p was generated) / len(y).
    Tokens without tags fall into an "untagged" class.  Rows come back
    sorted by mean, earliest-generated class first, as
    {tag, count, mean_norm_index, p25, p50, p75}.
    """
    per_tag: dict[str, list[float]] = {}
    for y, z, tags in decoded:
        z = _as_order(z)
        n = len(y)
        if z.n != n:
            raise ValueError(f"order length {z.n} does not match sentence length {n}")
        if tags is not None and len(tags) != n:
            raise ValueError(f"{len(tags)} tags for {n} tokens")
        step_of_pos = {p: t for t, p in enumerate(z.z, start=1)}
        for p in range(1, n + 1):
            tag = tags[p - 1] if tags is not None else UNTAGGED
            per_tag.setdefault(tag, []).append(step_of_pos[p] / n)
    rows = []
    for tag, vals in per_tag.items():
        arr = np.asarray(vals)
        rows.append({
            "tag": tag,
            "count": int(arr.size),
            "mean_norm_index": float(arr.mean()),
            "p25": float(np.percentile(arr, 25)),
            "p50": float(np.percentile(arr, 50)),
            "p75": float(np.percentile(arr, 75)),
        })
    rows.sort(key=lambda r: (r["mean_norm_index"], r["tag"]))
    return rows


def perturbation_study(
    phi: EncoderParams,
    ep: Episode,
    feature_mask_set: Sequence[Iterable[int]],
    kind: str = "gumbel_matching",
) -> list[tuple[tuple[int, ...], float]]:
    """Order drift when source positions are masked out.

    For each mask, recompute the encoder scores with those source
    positions zeroed, take the modal order, and report its NLD against
    the unmasked modal order.  The empty mask is always 0.
    """
    base = modal_order(phi, ep, kind)
    out = []
    for mask in feature_mask_set:
        mask = frozenset(int(i) for i in mask)
        z = modal_order(phi, ep, kind, masked=mask)
        out.append((tuple(sorted(mask)), nld(base, z)))
    return out
