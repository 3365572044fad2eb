"""Portable pseudo-random numbers: xoshiro256++ seeded through splitmix64.

Normals come from the Box-Muller transform over 53-bit uniforms, so a given
seed yields the same stream on every platform with IEEE-754 doubles.
Bulk generation is compiled with numba; the scalar path stays in Python.
"""
from __future__ import annotations

import math

import numba
import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step. Returns (new_state, output)."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


@numba.njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@numba.njit(cache=True)
def _fill_u64(s, out):
    s0, s1, s2, s3 = s[0], s[1], s[2], s[3]
    for i in range(out.shape[0]):
        out[i] = _rotl(s0 + s3, 23) + s0
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    s[0], s[1], s[2], s[3] = s0, s1, s2, s3


class Rng:
    """xoshiro256++ generator with a 256-bit state held as four uint64 words."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & MASK64
        x = self.seed
        words = []
        for _ in range(4):
            x, z = splitmix64(x)
            words.append(z)
        self.state = np.array(words, dtype=np.uint64)

    # -- raw output -------------------------------------------------------
    def next_u64(self, n: int) -> np.ndarray:
        out = np.empty(int(n), dtype=np.uint64)
        if n:
            _fill_u64(self.state, out)
        return out

    def uniform(self, shape=()) -> np.ndarray:
        """Doubles in [0, 1) with 53 random bits."""
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def normal(self, shape=()) -> np.ndarray:
        """Standard normals by Box-Muller; each uniform pair yields two values."""
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        bits = self.next_u64(2 * m) >> np.uint64(11)
        # (k + 1) / 2^53 lies in (0, 1], keeping log finite
        u1 = (bits[0::2].astype(np.float64) + 1.0) * 2.0**-53
        u2 = bits[1::2].astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(shape)

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection on the top bits."""
        if n <= 0:
            raise ValueError(f"below() needs n >= 1, got {n}")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = int(self.next_u64(1)[0])
            if x < limit:
                return x % n

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        p = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            p[i], p[j] = p[j], p[i]
        return p

    def derangement(self, n: int) -> np.ndarray:
        """Uniform random permutation without fixed points (n >= 2), by rejection."""
        if n < 2:
            raise ValueError("a derangement needs at least two elements")
        while True:
            p = self.permutation(n)
            if not np.any(p == np.arange(n)):
                return p

    # -- state ------------------------------------------------------------
    def get_state(self) -> str:
        return "".join(f"{int(w):016x}" for w in self.state)

    def set_state(self, hexstate: str) -> None:
        if len(hexstate) != 64:
            raise ValueError("generator state must be 64 hex digits")
        self.state = np.array(
            [int(hexstate[i : i + 16], 16) for i in range(0, 64, 16)], dtype=np.uint64
        )

    def copy(self) -> "Rng":
        r = Rng.__new__(Rng)
        r.seed = self.seed
        r.state = self.state.copy()
        return r
