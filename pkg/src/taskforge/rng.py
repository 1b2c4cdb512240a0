"""Deterministic random streams with hierarchical child derivation.

Every sampled quantity in the pipeline flows through an :class:`RngState`.
Children are derived by mixing path components (strings or ints) into the
parent key, so independent work items get independent, reproducible streams:
``RngState(seed).child("bundle", 17)`` is the same stream on every run and
every platform.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK64
    x ^= x >> 31
    return x


def mix_key(seed: int, *parts: int | str) -> int:
    """Fold path parts into a 64-bit child key.

    Python's built-in hash() is salted per process, so strings are folded
    byte-by-byte through splitmix64 instead.
    """
    h = _splitmix64(seed & _MASK64)
    for part in parts:
        if isinstance(part, str):
            h = _splitmix64(h ^ len(part))
            for b in part.encode("utf-8"):
                h = _splitmix64(h ^ b)
        else:
            h = _splitmix64(h ^ (int(part) & _MASK64))
    return h


class RngState:
    """A counter-based random stream identified by a 64-bit seed.

    Identical seed and draw position always replay identical values. The
    stream is backed by Philox, so state depends only on (key, counter).
    """

    __slots__ = ("seed", "draws", "_gen")

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.draws = 0
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed:#x}, draws={self.draws})"

    def child(self, *parts: int | str) -> "RngState":
        """Derive an independent stream for a named work item."""
        return RngState(mix_key(self.seed, *parts))

    # -- draw primitives ----------------------------------------------------

    def integers(self, low: int, high: int, size=None):
        """Uniform ints in [low, high), matching numpy's half-open convention."""
        self.draws += 1
        return self._gen.integers(low, high, size=size)

    def random(self, size=None):
        self.draws += 1
        return self._gen.random(size=size)

    def uniform(self, low: float, high: float, size=None):
        self.draws += 1
        return self._gen.uniform(low, high, size=size)

    def normal(self, loc: float, scale: float, size=None):
        self.draws += 1
        return self._gen.normal(loc, scale, size=size)

    def choice(self, items, size=None, replace=True):
        """Choose from a sequence (returns elements, not indices)."""
        self.draws += 1
        idx = self._gen.choice(len(items), size=size, replace=replace)
        if size is None:
            return items[int(idx)]
        return [items[int(i)] for i in idx]

    def shuffled(self, items):
        """Return a shuffled copy of a sequence."""
        self.draws += 1
        order = self._gen.permutation(len(items))
        return [items[int(i)] for i in order]

    def coin(self, p: float = 0.5) -> bool:
        return bool(self.random() < p)
