"""Seeded, label-splittable randomness.

Every random draw in the package flows from one root seed through named
substreams: ``SplitRng(seed).child("weights").child("layer0")``.  Child
derivation hashes (parent key, label) with SHA-256, so streams are stable
across runs, platforms and construction order.
"""
from __future__ import annotations

import hashlib

import numpy as np


class SplitRng:
    def __init__(self, seed: int, _key: bytes | None = None):
        self.seed = int(seed)
        self._key = _key if _key is not None else self.seed.to_bytes(8, "little", signed=True)
        self._gen = np.random.Generator(np.random.PCG64(int.from_bytes(self._key[:8], "little")))

    def child(self, label: str | int) -> "SplitRng":
        digest = hashlib.sha256(self._key + b"/" + str(label).encode()).digest()
        return SplitRng(self.seed, _key=digest[:8])

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def random(self, shape=None):
        return self._gen.random(size=shape)

    def choice(self, n: int, p=None) -> int:
        return int(self._gen.choice(n, p=p))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def xavier_uniform(rng: SplitRng, fan_in: int, fan_out: int) -> np.ndarray:
    """Xavier/Glorot uniform init for a (fan_in, fan_out) weight matrix."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))
