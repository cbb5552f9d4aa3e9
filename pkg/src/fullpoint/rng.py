"""Seeded random stream.

The raw stream is Philox4x64-10 (Salmon et al., counter-based) keyed by the
64-bit seed with a zero counter, taken from numpy's ``Philox`` bit generator
via ``random_raw``; numpy guarantees that raw stream is stable across
platforms and releases. All derived variates are computed here from raw
64-bit words so they do not depend on numpy's distribution code:

* uniform:    ``(w >> 11) * 2**-53``                     in [0, 1)
* normal:     Box-Muller on two uniforms, cosine branch
* integers:   ``((w >> 32) * n) >> 32``                  for n < 2**32
* permutation: stable argsort of n raw words
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class Rng:
    def __init__(self, seed: int = 0):
        self.seed = int(seed) & _MASK64
        self._bitgen = np.random.Philox(key=self.seed)

    def raw(self, size) -> np.ndarray:
        n = int(np.prod(size)) if np.ndim(size) else int(size)
        return np.asarray(self._bitgen.random_raw(n), dtype=np.uint64).reshape(size)

    def uniform(self, low=0.0, high=1.0, size=()) -> np.ndarray:
        words = self.raw(size if size != () else 1)
        u = (words >> np.uint64(11)).astype(np.float64) * (2.0**-53)
        out = low + (high - low) * u
        return out if size != () else float(out.reshape(-1)[0])

    def normal(self, mean=0.0, std=1.0, size=()):
        shape = size if size != () else (1,)
        n = int(np.prod(shape))
        u = self.uniform(size=(2, n))
        # 1 - u lies in (0, 1] so the log is finite
        z = np.sqrt(-2.0 * np.log(1.0 - u[0])) * np.cos(2.0 * np.pi * u[1])
        out = mean + std * z.reshape(shape)
        return out if size != () else float(out.reshape(-1)[0])

    def integers(self, n: int, size=()):
        if not 0 < n < 2**32:
            raise ValueError(f"integers: n={n} outside (0, 2**32)")
        words = self.raw(size if size != () else 1)
        out = (((words >> np.uint64(32)) * np.uint64(n)) >> np.uint64(32)).astype(np.int64)
        return out if size != () else int(out.reshape(-1)[0])

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.raw(n), kind="stable").astype(np.int64)

    def fork(self) -> "Rng":
        """Independent child stream seeded from the next raw word."""
        return Rng(int(self.raw(1)[0]))
