"""SplitMix64: a small, portable, seedable 64-bit generator.

Reference implementation: Sebastiano Vigna, ``splitmix64.c`` (public domain).
The i-th output (0-based) of a stream seeded with ``s`` is
``mix(s + (i + 1) * GOLDEN)``, which lets whole blocks be generated with
vectorized uint64 arithmetic.
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1

_G = np.uint64(GOLDEN)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, offset: int) -> int:
    """Seed of a sub-stream at a fixed offset from ``seed``."""
    return (seed + offset * 0x632BE59BD9B4E019) & MASK64


class SplitMix64:
    """Stateful SplitMix64 stream."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        return int(self.block(1)[0])

    def block(self, n: int) -> np.ndarray:
        """Next ``n`` outputs as a uint64 array."""
        idx = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + idx * _G
            out = _mix(z)
        self.state = (self.state + n * GOLDEN) & MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) with 53 random bits each."""
        return (self.block(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform_open(self, n: int) -> np.ndarray:
        """``n`` doubles in (0, 1], safe as a logarithm argument."""
        return ((self.block(n) >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53

    def random(self) -> float:
        return float(self.uniform(1)[0])

    def below(self, bound: int) -> int:
        """Integer in [0, bound) by rejection (unbiased)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % bound

    def normal(self, n: int) -> np.ndarray:
        """``n`` standard normals via Box-Muller; both outputs of a pair are used in order."""
        pairs = (n + 1) // 2
        u = self.uniform_open(2 * pairs).reshape(pairs, 2)
        radius = np.sqrt(-2.0 * np.log(u[:, 0]))
        angle = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = radius * np.cos(angle)
        z[:, 1] = radius * np.sin(angle)
        return z.reshape(-1)[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
