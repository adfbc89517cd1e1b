"""Seeded random streams.

Every stream is numpy's PCG64 bit generator seeded through ``SeedSequence``;
the algorithm is fixed so a given seed replays the same draws everywhere.
"""
from __future__ import annotations

import numpy as np


class Rng:
    def __init__(self, seed):
        if isinstance(seed, (list, tuple)):
            self.seed = tuple(int(s) for s in seed)
            entropy = list(self.seed)
        else:
            self.seed = int(seed)
            entropy = self.seed
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    def child(self, *keys) -> "Rng":
        """Independent stream keyed by ``(seed, *keys)``; does not advance self."""
        base = list(self.seed) if isinstance(self.seed, tuple) else [self.seed]
        return Rng(base + [int(k) for k in keys])

    def normal(self, shape, std=1.0):
        return (self._gen.standard_normal(shape) * std).astype(np.float32)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen
