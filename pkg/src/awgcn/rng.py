"""Seed expansion.

Every random stream in the package comes from one integer seed mixed with a
tuple of tags (command, purpose, index, ...).  String tags are folded to
32-bit integers with CRC32 so the mixing is stable across processes and
Python versions; the resulting entropy list feeds ``numpy.random.SeedSequence``.
"""

from __future__ import annotations

import zlib

import numpy as np


def _fold(tag: object) -> int:
    if isinstance(tag, (bool, np.bool_)):
        return int(tag)
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise ValueError(f"negative seed tag {tag}")
        return int(tag)
    return zlib.crc32(str(tag).encode("utf-8"))


def derive_rng(seed: int, *tags: object) -> np.random.Generator:
    """Return a PCG64 generator for ``(seed, *tags)``."""
    entropy = [_fold(seed)] + [_fold(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(entropy))
