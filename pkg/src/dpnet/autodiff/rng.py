"""Seeded random streams.

PCG64 seeded through ``SeedSequence`` gives the same draws on every platform,
and child streams keyed by an index make per-sample generation order-free.
"""
from __future__ import annotations

import numpy as np


class Rng:
    def __init__(self, seed: int | tuple[int, ...] = 0):
        self.seed = seed
        entropy = list(seed) if isinstance(seed, tuple) else int(seed)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, *key: int) -> "Rng":
        base = self.seed if isinstance(self.seed, tuple) else (int(self.seed),)
        return Rng(tuple(base) + tuple(int(k) for k in key))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self, size=None):
        return self._gen.random(size)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)
