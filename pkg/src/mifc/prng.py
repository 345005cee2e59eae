"""Deterministic SplitMix64 generator.

All randomness in the package (weight init, dataset shuffles, the synthetic
image generator) flows through this generator so that a seed fully determines
every artifact, independent of platform RNG libraries.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def prng_next(state: int) -> tuple[int, int]:
    """Advance a SplitMix64 state once; returns (output, next_state)."""
    state = (state + _GAMMA) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    z = z ^ (z >> 31)
    return z, state


class SplitMix64:
    """Stateful wrapper around :func:`prng_next` with numeric helpers."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        value, self.state = prng_next(self.state)
        return value

    def next_double(self) -> float:
        # 53-bit mantissa in [0, 1)
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.next_double()

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi] inclusive (modulo reduction; bias is negligible
        for the tiny ranges used here and keeps the draw at one u64)."""
        if hi < lo:
            raise ValueError("empty range")
        return lo + self.next_u64() % (hi - lo + 1)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates, iterating from the last index down."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_u64() % (i + 1)
            items[i], items[j] = items[j], items[i]

    def fill_u64(self, n: int) -> np.ndarray:
        """Next n outputs as a uint64 array; bit-identical to n next_u64 calls."""
        idx = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            s = np.uint64(self.state) + np.uint64(_GAMMA) * idx
            z = (s ^ (s >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GAMMA) & MASK64
        return z

    def fill_uniform(self, n: int, lo: float, hi: float, dtype=np.float64) -> np.ndarray:
        u = (self.fill_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (lo + (hi - lo) * u).astype(dtype)
