"""Portable seeded randomness.

Every random draw in the package goes through a Philox4x64-10 counter-based
generator keyed by ``(seed, stream path)``.  Uniforms are built from the raw
64-bit outputs and normals use Box-Muller, so the float sequences depend only
on Philox itself and not on numpy's higher-level samplers.
"""
from __future__ import annotations

import hashlib

import numpy as np

_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / 9007199254740992.0


def _stream_key(seed: int, path: tuple[int, ...]) -> int:
    # 64-bit seed in the low word, a 64-bit digest of the stream path in the high word.
    if not path:
        return seed & 0xFFFFFFFFFFFFFFFF
    raw = b"".join(int(p).to_bytes(8, "little", signed=False) for p in path)
    digest = int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(), "little")
    return (seed & 0xFFFFFFFFFFFFFFFF) | (digest << 64)


class Stream:
    """One independent random stream, e.g. ``Stream(42, 0, bag_index)``."""

    def __init__(self, seed: int, *path: int):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = seed
        self.path = tuple(int(p) for p in path)
        self._bits = np.random.Philox(key=_stream_key(seed, self.path))

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(n).astype(np.uint64, copy=False)

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """``n`` doubles in ``[low, high)`` with 53 bits of resolution."""
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return low + (high - low) * u

    def normal(self, n: int, sigma: float = 1.0) -> np.ndarray:
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)  # (0, 1], keeps log finite
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(_TWO_PI * u2)
        z[1::2] = r * np.sin(_TWO_PI * u2)
        return sigma * z[:n]

    def below(self, bound: int) -> int:
        """Uniform integer in ``[0, bound)`` (Lemire multiply-shift, no rejection)."""
        x = int(self.raw(1)[0])
        return (x * bound) >> 64

    def permutation(self, n: int) -> np.ndarray:
        perm = np.arange(n)
        # Fisher-Yates, high index down
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def sample(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, in draw order."""
        if k > n:
            raise ValueError("cannot sample more items than the population")
        pool = np.arange(n)
        for i in range(k):
            j = i + self.below(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k].copy()
