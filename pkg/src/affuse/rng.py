"""SplitMix64 random stream with Box-Muller normals.

Pure integer arithmetic on a 64-bit state, so a given seed yields the same
sequence on every platform. All randomness in the package (initialisation,
data generation, shuffling, dropout) is drawn from these streams.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_TWO_NEG_53 = 2.0 ** -53


def splitmix64(state: int) -> tuple[int, int]:
    """Advance ``state`` once; return ``(new_state, output)``."""
    state = (state + GOLDEN) & MASK64
    z = state
    z ^= z >> 30
    z = (z * _MIX1) & MASK64
    z ^= z >> 27
    z = (z * _MIX2) & MASK64
    z ^= z >> 31
    return state, z


class RngStream:
    """Deterministic stream of uniforms in (0, 1] and standard normals."""

    __slots__ = ("state", "_spare")

    def __init__(self, seed: int = 0):
        self.state = int(seed) & MASK64
        self._spare: float | None = None

    def __repr__(self) -> str:
        return f"RngStream(state={self.state:#018x})"

    def next_u64(self) -> int:
        self.state, z = splitmix64(self.state)
        return z

    def next_uniform(self) -> float:
        return ((self.next_u64() >> 11) + 1) * _TWO_NEG_53

    def next_normal(self) -> float:
        # Box-Muller pairs: the cosine branch is returned first, the sine branch next call.
        if self._spare is not None:
            z, self._spare = self._spare, None
            return z
        u1 = self.next_uniform()
        u2 = self.next_uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2
        self._spare = r * math.sin(theta)
        return r * math.cos(theta)

    def next_below(self, n: int) -> int:
        """Integer in [0, n). Uses the uniform draw, clamped so u = 1 maps to n - 1."""
        if n < 1:
            raise ValueError("n must be >= 1")
        return min(int(self.next_uniform() * n), n - 1)

    def uniform_array(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        vals = [low + (high - low) * self.next_uniform() for _ in range(n)]
        return np.array(vals, dtype=np.float64).reshape(shape)

    def normal_array(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        vals = [mean + std * self.next_normal() for _ in range(n)]
        return np.array(vals, dtype=np.float64).reshape(shape)

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of range(n)."""
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.next_below(i + 1)
            order[i], order[j] = order[j], order[i]
        return order


def derive(seed: int, salt: int) -> RngStream:
    """Independent-looking stream for a (seed, purpose) pair."""
    return RngStream((int(seed) ^ salt) & MASK64)
