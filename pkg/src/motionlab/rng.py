"""Counter-based random streams.

Each draw derives a fresh Philox generator from (seed, counter) and bumps the
counter, so identical (seed, counter) pairs reproduce identical values across
runs and platforms, and parallel components can own disjoint streams without
coordination.
"""

from __future__ import annotations

import numpy as np

_SPAWN_MIX = 0x9E3779B97F4A7C15  # golden-ratio increment, splitmix-style


class RngStream:
    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def _next_gen(self) -> np.random.Generator:
        bit = np.random.Philox(
            key=np.array([self.seed, 0], dtype=np.uint64),
            counter=np.array([0, 0, 0, self.counter], dtype=np.uint64),
        )
        self.counter += 1
        return np.random.Generator(bit)

    def normal(self, shape=(), loc=0.0, scale=1.0):
        return self._next_gen().normal(loc, scale, size=shape)

    def uniform(self, low=0.0, high=1.0, shape=()):
        return self._next_gen().uniform(low, high, size=shape)

    def integers(self, low, high, shape=()):
        return self._next_gen().integers(low, high, size=shape)

    def choice(self, n, size=None, p=None):
        return self._next_gen().choice(n, size=size, p=p)

    def permutation(self, n):
        return self._next_gen().permutation(n)

    def spawn(self, index: int) -> "RngStream":
        """Derive an independent child stream (e.g. one per environment)."""
        child_seed = (self.seed ^ ((index + 1) * _SPAWN_MIX)) & 0xFFFFFFFFFFFFFFFF
        return RngStream(child_seed)

    def state(self) -> tuple[int, int]:
        return (self.seed, self.counter)
