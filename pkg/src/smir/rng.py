"""Derived random streams: one global seed, stable per-purpose substreams."""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError("stream keys must be non-negative")
        return int(k)
    return zlib.crc32(str(k).encode())


def stream(seed: int, *keys) -> np.random.Generator:
    """Generator keyed by ``seed`` and any mix of ints/strings; order-sensitive."""
    return np.random.default_rng([_key(seed), *(_key(k) for k in keys)])
