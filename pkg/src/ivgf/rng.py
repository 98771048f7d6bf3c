"""Deterministic counter-based random numbers.

A stream is (seed, counter): draw i is a pure function of both, so any
stream can be replayed from its seed, and `derive` splits independent
sub-streams per subsystem ("init", "augment", "data", ...) without the
consumers ever perturbing each other. All arithmetic is 64-bit integer,
identical on every platform.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _finalize(z: int) -> int:
    # splitmix64 output mixer
    z &= _MASK
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & _MASK
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & _MASK
    z ^= z >> 31
    return z


def _key_word(key) -> int:
    if isinstance(key, bool):
        raise TypeError("bool is not a valid stream key")
    if isinstance(key, int):
        return key & _MASK
    if isinstance(key, str):
        h = 0xCBF29CE484222325  # FNV-1a over UTF-8 bytes
        for byte in key.encode("utf-8"):
            h = ((h ^ byte) * 0x100000001B3) & _MASK
        return h
    raise TypeError(f"stream keys must be int or str, got {type(key).__name__}")


class RngState:
    """One random stream: a 64-bit seed plus a draw counter."""

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0):
        self.seed = seed & _MASK
        self.counter = int(counter)

    def derive(self, *keys) -> "RngState":
        """Child stream keyed by (seed, *keys); independent of this one."""
        h = self.seed
        for key in keys:
            h = _finalize((h ^ _key_word(key)) + _GOLDEN)
        return RngState(h)

    def next_u64(self) -> int:
        self.counter += 1
        return _finalize((self.seed + _GOLDEN * self.counter) & _MASK)

    def uniform(self) -> float:
        """Uniform in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform_in(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.uniform()

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n). Modulo bias is < n/2**64, irrelevant here."""
        if n <= 0:
            raise ValueError(f"randint needs n > 0, got {n}")
        return self.next_u64() % n

    def bernoulli(self, p: float) -> bool:
        return self.uniform() < p

    def sample_distinct(self, n: int, k: int) -> list[int]:
        """k distinct integers from [0, n), partial Fisher-Yates order."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot sample {k} distinct values from {n}")
        pool = list(range(n))
        out = []
        for i in range(k):
            j = i + self.randint(n - i)
            pool[i], pool[j] = pool[j], pool[i]
            out.append(pool[i])
        return out

    def fill_uniform(self, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """Vectorized batch of uniform draws; bit-identical to repeated uniform()."""
        n = int(np.prod(shape)) if shape else 1
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        z = (np.uint64(self.seed) + np.uint64(_GOLDEN) * idx)
        z ^= z >> np.uint64(30)
        z *= np.uint64(0xBF58476D1CE4E5B9)
        z ^= z >> np.uint64(27)
        z *= np.uint64(0x94D049BB133111EB)
        z ^= z >> np.uint64(31)
        u = (z >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (lo + (hi - lo) * u).reshape(shape)
