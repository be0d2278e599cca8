"""Reproducible random streams.

Uniform draws come from numpy's Philox4x64 counter-based bit generator,
whose output for a given key is fixed across platforms. Normals are produced
from those uniforms with the Box-Muller transform, so the whole stream is a
function of the 64-bit seed only.
"""
from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _key(k) -> int:
    return zlib.crc32(k.encode("utf-8")) if isinstance(k, str) else int(k)


def derive_seed(seed: int, *keys) -> int:
    """Deterministic child seed for ``(seed, *keys)``; keys are ints or strings."""
    ss = np.random.SeedSequence(entropy=int(seed) & _MASK64, spawn_key=tuple(_key(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


class Rng:
    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        u = self._gen.random(size)
        return low + (high - low) * u

    def normal(self, size=None):
        shape = () if size is None else tuple(np.atleast_1d(size))
        n = int(np.prod(shape)) if shape else 1
        half = (n + 1) // 2
        u1 = 1.0 - self._gen.random(half)  # (0, 1]
        u2 = self._gen.random(half)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * half)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        z = z[:n]
        return float(z[0]) if not shape else z.reshape(shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def bernoulli(self, p: float, size=None):
        return self._gen.random(size) < p

    def permutation(self, n: int):
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = True):
        return self._gen.choice(n, size=size, replace=replace)


def seeded_rng(seed: int) -> Rng:
    return Rng(seed)
