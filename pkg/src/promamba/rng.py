"""Deterministic, splittable random streams."""

from __future__ import annotations

import numpy as np


class Rng:
    """Counter-based (Philox) random stream that can spawn independent children.

    A child stream is a pure function of the root seed and the label path, so
    draws from one stream never depend on how sibling streams were consumed.
    Every stochastic operation in the package takes one of these explicitly.
    """

    def __init__(self, seed: int | None = 0, _seq: np.random.SeedSequence | None = None):
        self._seq = _seq if _seq is not None else np.random.SeedSequence(seed)
        self._gen = np.random.Generator(np.random.Philox(self._seq))

    def child(self, *path: int) -> "Rng":
        seq = np.random.SeedSequence(
            entropy=self._seq.entropy,
            spawn_key=tuple(self._seq.spawn_key) + tuple(path),
        )
        return Rng(_seq=seq)

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def random(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
