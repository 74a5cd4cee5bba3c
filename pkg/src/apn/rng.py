"""SplitMix64 random streams.

Every random draw in the package (weight init, shuffling, augmentation,
synthetic data) derives from one root seed.  Child streams are split off by
name: ``child_seed = mix64(parent_seed ^ fnv1a64(name))``, so the stream a
parameter receives does not depend on the order in which layers are built.

Generation is counter based, which lets ``uniform(n)`` produce a block of
``n`` values with numpy while staying identical to ``n`` scalar calls.
"""

from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(0xBF58476D1CE4E5B9)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & MASK64
    return h


class SplitMix64:
    """Counter-based SplitMix64 generator."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self.state = self.seed

    def split(self, name: str) -> "SplitMix64":
        return SplitMix64(mix64(self.seed ^ fnv1a64(name)))

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def u64(self, n: int) -> np.ndarray:
        counters = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + counters * np.uint64(GAMMA)
            out = _mix64_array(z)
        self.state = (self.state + n * GAMMA) & MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) built from the top 53 bits."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normal(self, n: int) -> np.ndarray:
        # Box-Muller on pairs; 1 - u keeps the log argument in (0, 1].
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        radius = np.sqrt(-2.0 * np.log(1.0 - u[:m]))
        angle = 2.0 * np.pi * u[m:]
        return np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]

    def randint(self, high: int) -> int:
        """Integer in [0, high) by multiply-shift (bias below 2**-40 for small high)."""
        return (self.next_u64() * high) >> 64

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def permutation(self, n: int) -> list[int]:
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            order[i], order[j] = order[j], order[i]
        return order
