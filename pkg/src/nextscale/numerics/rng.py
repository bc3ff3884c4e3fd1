"""Seeded, splittable random streams (PCG64 behind numpy's SeedSequence)."""
from __future__ import annotations

import numpy as np


class RandomStream:
    """Deterministic generator; ``split`` derives independent child streams."""

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF)
        self.gen = np.random.Generator(np.random.PCG64(self._seq))

    def normal(self, shape=(), std: float = 1.0, dtype=np.float64) -> np.ndarray:
        return (self.gen.standard_normal(shape) * std).astype(dtype)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self.gen.uniform(low, high, shape)

    def integers(self, low: int, high: int | None = None, shape=None):
        return self.gen.integers(low, high, shape)

    def split(self, n: int = 1) -> list["RandomStream"]:
        return [RandomStream(s) for s in self._seq.spawn(n)]

    def child(self) -> "RandomStream":
        return self.split(1)[0]


def seeded_rng(seed: int) -> RandomStream:
    return RandomStream(seed)
