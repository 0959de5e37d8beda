"""Seeded, fully specified random streams.

Every stochastic step in the package (noise drift, dataset shuffles, error
injection, the outcome emulator) draws from SplitMix64 so that results are
reproducible bit-for-bit from a seed, independent of numpy's generator
versions.

Uniforms are ``(word >> 11) * 2**-53`` with exact zeros rejected (the word is
skipped).  Normals come from Box-Muller on consecutive uniform pairs, emitting
the cosine branch first and then the sine branch.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_TWO_NEG_53 = 2.0 ** -53


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Scalar SplitMix64 stream with uniform and normal helpers."""

    def __init__(self, seed: int = 0):
        self.state = seed & MASK64
        self._spare: float | None = None

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return _mix(self.state)

    def uniform(self) -> float:
        """Uniform in (0, 1); exact zeros are rejected."""
        while True:
            u = (self.next_u64() >> 11) * _TWO_NEG_53
            if u != 0.0:
                return u

    def normal(self) -> float:
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare = r * math.sin(theta)
        return r * math.cos(theta)

    def below(self, n: int) -> int:
        """Integer in [0, n) by ``next_u64() % n``."""
        if n <= 0:
            raise ValueError("n must be positive")
        return self.next_u64() % n

    def choice_index(self, n: int) -> int:
        """Index in [0, n) from one uniform draw: ``floor(u * n)``."""
        return min(int(self.uniform() * n), n - 1)


def words(seed: int, n: int, start: int = 0) -> np.ndarray:
    """Words ``start+1 .. start+n`` of the stream for ``seed``, vectorised.

    SplitMix64 is counter based: the i-th state is ``seed + i * GAMMA``.
    """
    i = np.arange(start + 1, start + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & MASK64) + i * np.uint64(GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
    return z


def uniforms(seed: int, n: int) -> np.ndarray:
    """First ``n`` uniforms of the stream, matching ``SplitMix64.uniform``."""
    out = np.empty(0, dtype=np.float64)
    consumed = 0
    while out.size < n:
        need = n - out.size
        w = words(seed, need, start=consumed)
        consumed += need
        u = (w >> np.uint64(11)).astype(np.float64) * _TWO_NEG_53
        out = np.concatenate([out, u[u != 0.0]])
    return out[:n]


def normals(seed: int, n: int) -> np.ndarray:
    """First ``n`` standard normals of the stream, matching ``SplitMix64.normal``."""
    pairs = (n + 1) // 2
    u = uniforms(seed, 2 * pairs)
    r = np.sqrt(-2.0 * np.log(u[0::2]))
    theta = 2.0 * np.pi * u[1::2]
    z = np.empty(2 * pairs, dtype=np.float64)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    return z[:n]


def derive_seed(seed: int, *keys: object) -> int:
    """Child seed for ``(seed, *keys)``; stable across processes and platforms.

    Used to give each image (and each purpose within an image) its own stream
    so that results do not depend on processing order.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(seed & MASK64).encode())
    for key in keys:
        h.update(b"\x1f")
        h.update(str(key).encode())
    return _mix(int.from_bytes(h.digest(), "little"))


def shuffle(items: list, seed: int) -> list:
    """Fisher-Yates shuffle driven by SplitMix64; returns a new list."""
    out = list(items)
    rng = SplitMix64(seed)
    for i in range(len(out) - 1, 0, -1):
        j = rng.below(i + 1)
        out[i], out[j] = out[j], out[i]
    return out
