"""Deterministic random-stream derivation and checksumming.

Every source of randomness in the package is a named substream of one
top-level integer seed, so components can be re-run in isolation
(data generation, weight init, proxy sampling, noise injection) without
perturbing each other's draws.
"""

from __future__ import annotations

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash of a byte string."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def substream(seed: int, label: str) -> np.random.Generator:
    """Generator for the named substream of `seed`.

    Distinct labels give statistically independent streams; the same
    (seed, label) pair always gives the same stream.
    """
    return np.random.default_rng(np.random.SeedSequence([seed & _MASK64, fnv1a64(label.encode("utf-8"))]))
