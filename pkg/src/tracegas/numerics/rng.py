"""Splittable, counter-based random number generation.

Streams are backed by numpy's Philox counter-based bit generator.  A child
stream is derived from ``(seed, label)`` by hashing, so sibling streams are
statistically independent and the values drawn from one stream never depend
on how much was drawn from another.
"""
from __future__ import annotations

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes, state: int = FNV_OFFSET) -> int:
    """64-bit FNV-1a hash (also used as the checkpoint payload digest)."""
    for byte in data:
        state ^= byte
        state = (state * FNV_PRIME) & _MASK64
    return state


class Rng:
    """Deterministic stream keyed by a 64-bit seed and a derivation path."""

    def __init__(self, seed: int, path: str = ""):
        self.seed = int(seed) & _MASK64
        self.path = path
        key = fnv1a64(f"{self.seed}:{path}".encode())
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, label: str) -> "Rng":
        """Independent sub-stream; same (seed, path, label) => same stream."""
        sub = f"{self.path}/{label}" if self.path else str(label)
        return Rng(self.seed, sub)

    # Thin draw helpers -----------------------------------------------------

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self._gen.standard_normal(shape) * std).astype(dtype)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0,
                dtype=np.float32) -> np.ndarray:
        return self._gen.uniform(low, high, shape).astype(dtype)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)
