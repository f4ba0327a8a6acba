"""Portable counter-based random number generation.

Every stochastic quantity in this package (sensor noise, bad-data signs,
missing-data draws, household profiles) is derived from a stateless
counter-based generator so that fixture files are bit-stable across
platforms and across implementations in other languages.

The generator is SplitMix64 applied to a keyed counter:

    raw(seed, stream, i) = mix(mix(seed XOR (stream * STREAM_SALT)) + i * GAMMA)

with the standard SplitMix64 finalizer

    mix(z): z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
            z ^= z >> 27; z *= 0x94D049BB133111EB
            z ^= z >> 31

and constants

    GAMMA       = 0x9E3779B97F4A7C15   (2^64 / golden ratio)
    STREAM_SALT = 0xD6E8FEB86659FD93

All arithmetic is modulo 2^64.  Streams are identified by strings (for
example ``"sm_p:B07:a"``) hashed with FNV-1a 64, so adding or removing
channels never perturbs the noise of unrelated channels.

Uniform doubles use the top 53 bits; normals use Box-Muller on counter
pairs ``(2i, 2i+1)``.
"""

from __future__ import annotations

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
STREAM_SALT = np.uint64(0xD6E8FEB86659FD93)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)


def _mix(z: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps modulo 2^64 by design
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def stream_id(key: str) -> int:
    """FNV-1a 64 hash of a stream key string."""
    h = int(_FNV_OFFSET)
    for b in key.encode("utf-8"):
        h = ((h ^ b) * int(_FNV_PRIME)) % (1 << 64)
    return h


def raw(seed: int, stream: int, counters) -> np.ndarray:
    """Raw 64-bit outputs for the given counter(s)."""
    counters = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        key = _mix(np.uint64(seed % (1 << 64))
                   ^ np.uint64((stream * int(STREAM_SALT)) % (1 << 64)))
        out = _mix(key + counters * GAMMA)
    return out


def uniform(seed: int, stream: int, counters) -> np.ndarray:
    """Uniform doubles in (0, 1), one per counter."""
    bits = raw(seed, stream, counters)
    # top 53 bits, offset by half an ulp so 0.0 is never produced
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)


def normal(seed: int, stream: int, counters) -> np.ndarray:
    """Standard normals via Box-Muller on counter pairs (2i, 2i+1)."""
    counters = np.asarray(counters, dtype=np.uint64)
    u1 = uniform(seed, stream, counters * np.uint64(2))
    u2 = uniform(seed, stream, counters * np.uint64(2) + np.uint64(1))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


class Rng:
    """Convenience wrapper binding a seed, tracking per-stream counters."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._counters: dict[int, int] = {}

    def _take(self, key: str, n: int) -> np.ndarray:
        sid = stream_id(key)
        start = self._counters.get(sid, 0)
        self._counters[sid] = start + n
        return np.arange(start, start + n, dtype=np.uint64)

    def normal(self, key: str, n: int = 1) -> np.ndarray:
        return normal(self.seed, stream_id(key), self._take(key, n))

    def uniform(self, key: str, n: int = 1) -> np.ndarray:
        return uniform(self.seed, stream_id(key), self._take(key, n))
