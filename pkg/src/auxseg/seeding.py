"""Deterministic RNG stream derivation.

Every source of randomness in the pipeline (parameter init, batch sampling,
augmentation, auxiliary example construction) draws from its own stream derived
from (seed, purpose tags). Adding or removing one consumer therefore never
shifts another consumer's stream, which is what makes the degenerate-weight
equalities (e.g. joint training at lambda=0 vs conventional training) exact.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_entropy(seed: int, tags: tuple) -> list[int]:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for tag in tags:
        if isinstance(tag, int):
            entropy.append(tag & 0xFFFFFFFF)
        else:
            entropy.append(zlib.crc32(str(tag).encode("utf-8")))
    return entropy


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """Return an independent numpy Generator for the stream named by tags."""
    return np.random.default_rng(np.random.SeedSequence(_tag_entropy(seed, tags)))


def derive_seed(seed: int, *tags) -> int:
    """Collapse (seed, tags) to a single 63-bit integer seed."""
    ss = np.random.SeedSequence(_tag_entropy(seed, tags))
    return int(ss.generate_state(1, np.uint64)[0] >> 1)
