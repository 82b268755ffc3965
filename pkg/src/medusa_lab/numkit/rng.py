"""Counter-based, splittable random streams (Philox keyed by seed + path)."""

import hashlib

import numpy as np


def _key(seed, path):
    h = hashlib.sha256(repr((int(seed), tuple(path))).encode()).digest()
    return np.frombuffer(h[:16], dtype="<u8").copy()


class Rng:
    """Named substreams of one master seed.

    ``Rng(7).child("corpus").child("img", 3)`` always yields the same draws,
    independent of what other substreams have consumed.
    """

    def __init__(self, seed, path=()):
        self.seed = int(seed)
        self.path = tuple(path)
        self._bitgen = np.random.Philox(key=_key(self.seed, self.path))
        self.gen = np.random.Generator(self._bitgen)

    def child(self, *names):
        return Rng(self.seed, self.path + tuple(str(n) for n in names))

    @property
    def position(self):
        return int(self._bitgen.state["state"]["counter"][0])

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        """Inclusive-exclusive integer draws, like ``Generator.integers``."""
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True):
        return self.gen.choice(a, size=size, replace=replace)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={'/'.join(self.path) or '-'})"
