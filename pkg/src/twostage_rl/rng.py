"""Counter-based random streams.

Every trajectory draws its uniforms from a stream keyed by a tuple of integer
coordinates, e.g. ``(seed, step, instance, stage, i, j)``. The value at
position ``t`` of a stream is a pure function of ``(key, t)``, so rollouts can
be generated in any order, batched, or split across workers without changing a
single bit of the result.

The mixer is SplitMix64, evaluated on numpy ``uint64`` arrays.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = z.copy()
    z ^= z >> np.uint64(30)
    z *= _M1
    z ^= z >> np.uint64(27)
    z *= _M2
    z ^= z >> np.uint64(31)
    return z


def stream_key(*coords: int) -> int:
    """Fold integer coordinates into a 64-bit stream key."""
    return int(stream_keys([coords])[0])


def stream_keys(coords: Iterable[Sequence[int]]) -> np.ndarray:
    """Vectorised :func:`stream_key` over rows of coordinates."""
    arr = np.asarray(list(coords), dtype=np.int64)
    if arr.ndim != 2:
        raise ValueError("coords must be a sequence of equal-length integer tuples")
    if (arr < 0).any():
        raise ValueError("stream coordinates must be non-negative")
    key = np.zeros(arr.shape[0], dtype=np.uint64)
    with np.errstate(over="ignore"):
        for col in range(arr.shape[1]):
            key = _mix(key + _GOLDEN + arr[:, col].astype(np.uint64))
    return key


def uniforms(keys: np.ndarray | Sequence[int], length: int) -> np.ndarray:
    """Return an array of shape ``(len(keys), length)`` of floats in [0, 1).

    Row ``r`` holds positions ``0..length-1`` of the stream ``keys[r]``.
    """
    keys = np.asarray(keys, dtype=np.uint64).reshape(-1, 1)
    counters = np.arange(1, length + 1, dtype=np.uint64).reshape(1, -1)
    with np.errstate(over="ignore"):
        bits = _mix(keys ^ _mix(counters * _GOLDEN))
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


class CounterStream:
    """A single keyed stream exposing the small slice of the Generator API we use."""

    def __init__(self, *coords: int):
        self.key = stream_key(*coords)
        self._pos = 0

    def random(self, size: int | None = None):
        n = 1 if size is None else int(size)
        out = uniforms([self.key], self._pos + n)[0, self._pos:]
        self._pos += n
        return float(out[0]) if size is None else out
