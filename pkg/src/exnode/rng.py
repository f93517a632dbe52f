"""Deterministic random streams built on the Philox counter-based generator.

Philox is specified by a published algorithm and keyed directly, so the
same (seed, stream) pair reproduces the same draws on any platform or
language with a Philox implementation.  Substreams are derived by
hashing stream labels into the second half of the 128-bit key, which
keeps independent pipeline stages (init, batching, probes, sampling)
from sharing a stream.
"""

from __future__ import annotations

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1


def _mix(parts) -> int:
    h = _FNV_OFFSET
    for part in parts:
        data = part.encode() if isinstance(part, str) else (
            int(part).to_bytes(8, "little", signed=False))
        for byte in data:
            h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Generator keyed by (seed, hashed stream labels)."""
    key = np.array([int(seed) & _MASK, _mix(stream)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def rademacher(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0
