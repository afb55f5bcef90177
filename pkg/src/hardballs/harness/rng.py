"""Seeded random streams.

Every stream is numpy's Philox4x64 counter-based generator keyed by
``(seed, index)``; sample ``index`` of an ensemble always draws from key
``(seed, index)``, independent of how samples are scheduled on workers.
"""
from __future__ import annotations

import numpy as np

_U64 = (1 << 64) - 1


def stream(seed: int, index: int = 0) -> np.random.Generator:
    if seed < 0 or seed > _U64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    key = np.array([seed & _U64, index & _U64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
