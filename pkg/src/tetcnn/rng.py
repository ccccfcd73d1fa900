"""Seed-stream derivation.

Every random draw in the package comes from one integer seed split into named
streams (``matching``, ``init``, ``folds``, ``generation``, ...).  Streams are
Philox generators keyed by ``SeedSequence(seed, spawn_key=(purpose, *ids))`` so
they are independent of call order.
"""

from __future__ import annotations

import zlib

import numpy as np

PURPOSES = ("matching", "init", "folds", "shuffle", "generation", "power", "probe")


def _purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *ids: int) -> np.random.Generator:
    """Generator for ``purpose`` under ``seed``; extra ``ids`` split it further."""
    key = (_purpose_code(purpose),) + tuple(int(i) for i in ids)
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, purpose: str, *ids: int) -> int:
    """A 63-bit integer seed derived from a stream (for APIs that want ints)."""
    return int(stream(seed, purpose, *ids).integers(0, 2**63 - 1))
