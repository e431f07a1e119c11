"""Episodes, vocabularies, corpora, and synthetic data generation.

A corpus directory holds three files:

* ``corpus.jsonl``: one episode per line with fields x, y, tags,
  planted_z (permutations serialized as 1-based integer arrays).
* ``vocab.json``: token strings and the end-token id.
* ``meta.json``: generator name, rule, seed, and sizes.

Synthetic corpora plant a generation order per episode according to a
named rule; the planted order is what the encoder is later scored
against.  Token id 0 is reserved for the end token; content ids start
at 1.  Content tokens are drawn from a Zipf-like distribution so the
corpus frequency table has few exact ties.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .permutations import Permutation
from .seeding import substream

RULES = ("ltr", "random", "common_first", "rare_first", "content_first")

END_TOKEN = "<end>"


@dataclass(frozen=True)
class Vocab:
    """Token strings with dense ids; index in `tokens` is the id.

    ``end_id`` may be None for terminator-free toy vocabularies, in
    which case decoding runs to its length cap.
    """

    tokens: tuple[str, ...]
    end_id: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(str(t) for t in self.tokens))
        if len(self.tokens) == 0:
            raise ValueError("empty vocabulary")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate token strings")
        if self.end_id is not None and not 0 <= self.end_id < len(self.tokens):
            raise ValueError(f"end_id {self.end_id} outside [0, {len(self.tokens)})")

    @property
    def size(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class Episode:
    """One (source, target) pair, with optional tags and planted order."""

    x: tuple[int, ...]
    y: tuple[int, ...]
    tags: tuple[str, ...] | None = None
    planted_z: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", tuple(int(v) for v in self.x))
        object.__setattr__(self, "y", tuple(int(v) for v in self.y))
        if len(self.y) == 0:
            raise ValueError("target must have length >= 1")
        if self.tags is not None:
            object.__setattr__(self, "tags", tuple(str(t) for t in self.tags))
            if len(self.tags) != len(self.y):
                raise ValueError("tags length must match target length")
        if self.planted_z is not None:
            z = tuple(int(v) for v in self.planted_z)
            Permutation(z)
            if len(z) != len(self.y):
                raise ValueError("planted order length must match target length")
            object.__setattr__(self, "planted_z", z)

    @property
    def n(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class Corpus:
    episodes: tuple[Episode, ...]
    vocab: Vocab
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "episodes", tuple(self.episodes))
        if len(self.episodes) == 0:
            raise ValueError("empty corpus")
        top = self.vocab.size
        for ep in self.episodes:
            if any(not 0 <= t < top for t in ep.x + ep.y):
                raise ValueError("token id outside vocabulary")

    def __len__(self) -> int:
        return len(self.episodes)


def planted_order(ep: Episode) -> Permutation:
    """The order planted at generation time; fails if absent."""
    if ep.planted_z is None:
        raise ValueError("episode has no planted order")
    return Permutation(ep.planted_z)


def token_frequencies(episodes) -> np.ndarray:
    """Corpus-wide target-side token counts, indexed by token id."""
    top = 1 + max(max(ep.y) for ep in episodes)
    counts = np.zeros(top, dtype=np.int64)
    for ep in episodes:
        for t in ep.y:
            counts[t] += 1
    return counts


def _plant(rule: str, y: tuple[int, ...], counts: np.ndarray, rng: np.random.Generator,
           content_cut: int) -> tuple[int, ...]:
    n = len(y)
    positions = list(range(1, n + 1))
    if rule == "ltr":
        return tuple(positions)
    if rule == "random":
        return tuple(int(p) for p in rng.permutation(n) + 1)
    if rule == "common_first":
        return tuple(sorted(positions, key=lambda p: (-counts[y[p - 1]], y[p - 1], p)))
    if rule == "rare_first":
        return tuple(sorted(positions, key=lambda p: (counts[y[p - 1]], y[p - 1], p)))
    if rule == "content_first":
        return tuple(sorted(positions, key=lambda p: (int(y[p - 1] > content_cut), p)))
    raise ValueError(f"unknown rule: {rule!r}")


def gen_data(rule: str, size: int, vocab_size: int, length_range: tuple[int, int],
             seed: int) -> Corpus:
    """Generate a synthetic corpus with a planted order per episode.

    ``vocab_size`` counts content tokens; the end token is added on top
    as id 0.  Episodes are copy tasks with an id-sorted surface order,
    so reconstruction is a learnable rule instead of recall of arbitrary
    pairs.  Draws are Zipf-weighted under a seeded shuffle of the ids,
    which keeps the frequency rules keyed to token identity rather than
    to surface position.  Sources are deduplicated so episodes stay
    distinguishable.
    """
    if rule not in RULES:
        raise ValueError(f"unknown rule {rule!r}, expected one of {RULES}")
    lo, hi = length_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad length range {length_range}")
    if size < 1 or vocab_size < 1:
        raise ValueError("size and vocab_size must be >= 1")
    tokens = (END_TOKEN,) + tuple(f"t{i}" for i in range(1, vocab_size + 1))
    vocab = Vocab(tokens, end_id=0)
    content_ids = np.arange(1, vocab_size + 1)
    freq_rank = substream(seed, "freq").permutation(vocab_size)
    weights = 1.0 / (1.0 + freq_rank.astype(float)) ** 1.2
    weights /= weights.sum()
    content_cut = max(1, vocab_size // 2)

    data_rng = substream(seed, "data")
    seen_sources: set[tuple[int, ...]] = set()
    raw: list[tuple[tuple[int, ...], tuple[int, ...]]] = []
    for _ in range(size):
        n = int(data_rng.integers(lo, hi + 1))
        while True:
            y = tuple(sorted(int(t) for t in data_rng.choice(content_ids, size=n, p=weights)))
            if y not in seen_sources:
                seen_sources.add(y)
                break
        raw.append((y, y))

    counts = np.zeros(vocab_size + 1, dtype=np.int64)
    for _, y in raw:
        for t in y:
            counts[t] += 1

    episodes = []
    for idx, (x, y) in enumerate(raw):
        plant_rng = substream(seed, "plant", idx)
        z = _plant(rule, y, counts, plant_rng, content_cut)
        tags = None
        if rule == "content_first":
            tags = tuple("content" if t <= content_cut else "filler" for t in y)
        episodes.append(Episode(x=x, y=y, tags=tags, planted_z=z))
    meta = {
        "rule": rule,
        "seed": seed,
        "size": size,
        "vocab_size": vocab_size,
        "length_range": [lo, hi],
    }
    return Corpus(tuple(episodes), vocab, meta)


def save_corpus(corpus: Corpus, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "corpus.jsonl", "w", encoding="utf-8") as fh:
        for ep in corpus.episodes:
            fh.write(json.dumps({
                "x": list(ep.x),
                "y": list(ep.y),
                "tags": list(ep.tags) if ep.tags is not None else None,
                "planted_z": list(ep.planted_z) if ep.planted_z is not None else None,
            }) + "\n")
    with open(directory / "vocab.json", "w", encoding="utf-8") as fh:
        json.dump({"tokens": list(corpus.vocab.tokens), "end_id": corpus.vocab.end_id},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(directory / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(corpus.metadata, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_corpus(directory: str | Path) -> Corpus:
    directory = Path(directory)
    corpus_path = directory / "corpus.jsonl"
    vocab_path = directory / "vocab.json"
    if not corpus_path.exists() or not vocab_path.exists():
        raise FileNotFoundError(f"no corpus at {directory}")
    with open(vocab_path, encoding="utf-8") as fh:
        vj = json.load(fh)
    vocab = Vocab(tuple(vj["tokens"]), end_id=vj.get("end_id"))
    episodes = []
    with open(corpus_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                episodes.append(Episode(
                    x=tuple(rec["x"]),
                    y=tuple(rec["y"]),
                    tags=tuple(rec["tags"]) if rec.get("tags") else None,
                    planted_z=tuple(rec["planted_z"]) if rec.get("planted_z") else None,
                ))
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{corpus_path}:{lineno}: malformed episode: {exc}") from exc
    meta_path = directory / "meta.json"
    metadata = {}
    if meta_path.exists():
        with open(meta_path, encoding="utf-8") as fh:
            metadata = json.load(fh)
    return Corpus(tuple(episodes), vocab, metadata)
