"""Synthetic corpora: planted rules, persistence, validation."""
import numpy as np
import pytest

from orderinfer.corpus import (
    Corpus,
    Episode,
    Vocab,
    gen_data,
    load_corpus,
    planted_order,
    save_corpus,
    token_frequencies,
)
from orderinfer.permutations import Permutation


def test_gen_data_is_deterministic():
    a = gen_data("common_first", 20, 30, (4, 9), seed=5)
    b = gen_data("common_first", 20, 30, (4, 9), seed=5)
    assert a.episodes == b.episodes
    assert a.vocab == b.vocab
    c = gen_data("common_first", 20, 30, (4, 9), seed=6)
    assert a.episodes != c.episodes


def test_episodes_are_copy_tasks_with_sorted_surface():
    corpus = gen_data("ltr", 30, 40, (3, 10), seed=0)
    for ep in corpus.episodes:
        assert ep.x == ep.y
        assert list(ep.y) == sorted(ep.y)
        assert 3 <= len(ep.y) <= 10
        assert all(1 <= t <= 40 for t in ep.y)


def test_vocab_layout_and_end_token():
    corpus = gen_data("random", 5, 12, (4, 4), seed=1)
    assert corpus.vocab.size == 13
    assert corpus.vocab.end_id == 0
    assert corpus.vocab.tokens[0] == "<end>"
    assert corpus.vocab.tokens[1] == "t1"


def test_ltr_plants_identity():
    corpus = gen_data("ltr", 10, 20, (5, 8), seed=2)
    for ep in corpus.episodes:
        assert planted_order(ep) == Permutation(tuple(range(1, ep.n + 1)))


def test_common_first_plants_descending_frequency():
    corpus = gen_data("common_first", 40, 25, (4, 10), seed=3)
    counts = token_frequencies(corpus.episodes)
    for ep in corpus.episodes:
        z = planted_order(ep)
        keys = [(-counts[ep.y[p - 1]], ep.y[p - 1], p) for p in z.z]
        assert keys == sorted(keys)


def test_rare_first_is_common_first_reversed_on_distinct_tokens():
    corpus = gen_data("rare_first", 40, 25, (4, 10), seed=4)
    counts = token_frequencies(corpus.episodes)
    for ep in corpus.episodes:
        z = planted_order(ep)
        freqs = [int(counts[ep.y[p - 1]]) for p in z.z]
        assert freqs == sorted(freqs)


def test_content_first_prefix_and_tags():
    corpus = gen_data("content_first", 30, 20, (4, 9), seed=5)
    cut = max(1, 20 // 2)
    for ep in corpus.episodes:
        assert ep.tags is not None
        assert all(
            tag == ("content" if t <= cut else "filler")
            for tag, t in zip(ep.tags, ep.y))
        z = planted_order(ep)
        flags = [int(ep.y[p - 1] > cut) for p in z.z]
        assert flags == sorted(flags)  # all content positions first
        # within each class the planted order keeps surface order
        for cls in (0, 1):
            picked = [p for p in z.z if int(ep.y[p - 1] > cut) == cls]
            assert picked == sorted(picked)


def test_random_rule_is_seeded_per_episode():
    a = gen_data("random", 15, 30, (5, 9), seed=7)
    b = gen_data("random", 15, 30, (5, 9), seed=7)
    assert [ep.planted_z for ep in a.episodes] == [ep.planted_z for ep in b.episodes]
    assert any(ep.planted_z != tuple(range(1, ep.n + 1)) for ep in a.episodes)


def test_sources_are_unique():
    corpus = gen_data("ltr", 60, 15, (3, 6), seed=8)
    xs = [ep.x for ep in corpus.episodes]
    assert len(set(xs)) == len(xs)


def test_frequencies_count_target_side():
    eps = [Episode(x=(1,), y=(1, 1, 2)), Episode(x=(2,), y=(2, 3))]
    counts = token_frequencies(eps)
    assert counts.tolist() == [0, 2, 2, 1]


def test_save_load_roundtrip(tmp_path):
    corpus = gen_data("content_first", 12, 18, (4, 8), seed=9)
    save_corpus(corpus, tmp_path / "c")
    back = load_corpus(tmp_path / "c")
    assert back.episodes == corpus.episodes
    assert back.vocab == corpus.vocab
    assert back.metadata == corpus.metadata


def test_load_missing_directory_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path / "nope")


def test_load_malformed_line_reports_position(tmp_path):
    corpus = gen_data("ltr", 3, 10, (3, 4), seed=10)
    save_corpus(corpus, tmp_path / "c")
    path = tmp_path / "c" / "corpus.jsonl"
    lines = path.read_text().splitlines()
    lines[1] = '{"x": [1], "y": []}'
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match="corpus.jsonl:2"):
        load_corpus(tmp_path / "c")


def test_validation_errors():
    with pytest.raises(ValueError):
        Vocab(())
    with pytest.raises(ValueError):
        Vocab(("a", "a"))
    with pytest.raises(ValueError):
        Vocab(("a",), end_id=3)
    with pytest.raises(ValueError):
        Episode(x=(1,), y=())
    with pytest.raises(ValueError):
        Episode(x=(1,), y=(1, 2), tags=("one",))
    with pytest.raises(ValueError):
        Episode(x=(1,), y=(1, 2), planted_z=(1,))
    with pytest.raises(ValueError):
        Episode(x=(1,), y=(1, 2), planted_z=(1, 3))
    with pytest.raises(ValueError):
        Corpus((), Vocab(("a",)))
    with pytest.raises(ValueError):
        Corpus((Episode(x=(0,), y=(5,)),), Vocab(("a", "b")))
    with pytest.raises(ValueError):
        gen_data("zigzag", 5, 10, (3, 4), seed=0)
    with pytest.raises(ValueError):
        gen_data("ltr", 5, 10, (0, 4), seed=0)
    with pytest.raises(ValueError):
        gen_data("ltr", 0, 10, (3, 4), seed=0)
    with pytest.raises(ValueError):
        planted_order(Episode(x=(1,), y=(1,)))
