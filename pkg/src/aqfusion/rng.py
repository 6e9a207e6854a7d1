"""Seedable, splittable random streams.

Every stream is a Philox-4x64 counter-based generator keyed by a
``numpy.random.SeedSequence``.  A child stream is addressed by the parent's
seed plus a path of names, so ``Rng(42).split("dropout")`` always yields the
same sequence regardless of how much the parent has been consumed.  Each
consumer (init, augmentation, dropout, shuffling, bootstrap, masks) takes its
own named child.
"""

from __future__ import annotations

import zlib

import numpy as np


class Rng:
    """Deterministic random stream.

    Args:
        seed: non-negative integer seed.
        path: names of the split chain leading to this stream.
    """

    def __init__(self, seed: int = 42, path: tuple[str, ...] = ()):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.path = tuple(path)
        key = tuple(zlib.crc32(p.encode("utf-8")) for p in self.path)
        self._seq = np.random.SeedSequence(entropy=self.seed, spawn_key=key)
        self.gen = np.random.Generator(np.random.Philox(self._seq))

    def split(self, name) -> "Rng":
        """Return the independent child stream called ``name``."""
        return Rng(self.seed, self.path + (str(name),))

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={'/'.join(self.path) or '.'})"

    # thin pass-throughs so call sites read naturally
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def random(self, size=None):
        return self.gen.random(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)
