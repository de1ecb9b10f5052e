"""Deterministic random-number lanes.

Every random choice in the package draws from a lane derived from the
single run seed plus a stable name, so components (dataset bytes, weight
init, shuffling, candidate sampling) are reproducible independently of
each other and of call order elsewhere.
"""

from __future__ import annotations

import zlib

import numpy as np


def lane_rng(seed: int, lane: str) -> np.random.Generator:
    """A generator seeded by (seed, crc32(lane)); stable across runs."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.default_rng([int(seed), zlib.crc32(lane.encode("utf-8"))])
