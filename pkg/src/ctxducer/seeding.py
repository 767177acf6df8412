"""Deterministic RNG derivation.

Every random draw in the package comes from a stream derived here. Streams
are keyed by (seed, *labels) so that adding or removing one consumer (an
extra parameter tensor, an optional module) never shifts the draws of any
other consumer.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part: object) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def derive_rng(seed: int, *labels: object) -> np.random.Generator:
    """A PCG64 generator keyed by ``seed`` and an arbitrary label path."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key(p) for p in labels]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
