"""Deterministic named RNG substreams.

Every stochastic component draws from its own generator keyed by
(base seed, stream name, *indices) so that runs are reproducible and
individual draws do not depend on evaluation order or worker count.
"""
from __future__ import annotations

import os
import zlib

import numpy as np

THREADS_ENV_VAR = "ORDER_INFER_THREADS"


def substream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Return a generator for the (seed, name, *indices) substream.

    The stream name is folded to an integer with crc32 so the key is a
    plain tuple of ints, which SeedSequence mixes properly.
    """
    key = (int(seed), zlib.crc32(name.encode("utf-8")), *(int(i) for i in indices))
    return np.random.default_rng(np.random.SeedSequence(key))


def worker_count() -> int:
    """Worker cap from ORDER_INFER_THREADS, defaulting to 1."""
    raw = os.environ.get(THREADS_ENV_VAR, "")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)
