"""Named random streams derived from a single integer seed."""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for the sub-stream ``name`` of ``seed``.

    The same (seed, name) pair always yields the same sequence, and distinct
    names give statistically independent sequences.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(key,)))
