"""Platform independent pseudo random numbers.

    Every random draw in pyfedattn (weights, corpora, sparse token and KV
    sampling) comes from this module so that a seed reproduces the exact same
    bits on every platform and numpy version.

    # Algorithms

    `SplitMix64` (used for seeding and for `derive`)::

        state = state + 0x9E3779B97F4A7C15
        z = (state ^ (state >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        return z ^ (z >> 31)

    `Xoshiro256StarStar` (the generator) is seeded with four consecutive
    `SplitMix64` outputs and produces::

        result = rotl(s1 * 5, 7) * 9
        t = s1 << 17
        s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3
        s2 ^= t; s3 = rotl(s3, 45)

    All arithmetic is modulo 2^64.

    Derived draws:

    + `uniform()`: `(next_u64() >> 11) * 2^-53`, in [0, 1).
    + `integers(lo, hi)`: unbiased by rejection on the top bits, in [lo, hi).
    + `normal()`: Box-Muller with `u1 = 1 - uniform()` so the logarithm is finite,
      returning the cosine branch first and caching the sine branch.
    + `sample(population, k)`: partial Fisher-Yates, the chosen items sorted ascending.
"""
import math
import zlib

from typing import List, Optional, Sequence, TypeVar, Union

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15

T = TypeVar('T')


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64():
    """The SplitMix64 generator, used to expand a single 64-bit seed."""

    def __init__(self, seed: int) -> None:
        self._state = seed & MASK64

    def next_u64(self) -> int:
        self._state = (self._state + GOLDEN_GAMMA) & MASK64
        return _mix64(self._state)


class Xoshiro256StarStar():
    """ The xoshiro256** generator seeded through `SplitMix64`.

        Not thread safe, create one generator per stream (see `derive`).
    """

    def __init__(self, seed: int) -> None:
        sm = SplitMix64(seed)
        self._s = [sm.next_u64() for _ in range(4)]
        self._spare: Optional[float] = None

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64

        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)

        return result

    def uniform(self) -> float:
        """Uniform real in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def integers(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi) without modulo bias."""
        n = hi - lo
        if n <= 0:
            raise ValueError(f'Empty integer range [{lo}, {hi})')
        if n == 1:
            return lo

        bits = (n - 1).bit_length()
        while True:
            x = self.next_u64() >> (64 - bits)
            if x < n:
                return lo + x

    def normal(self) -> float:
        """Standard normal variate by Box-Muller."""
        if self._spare is not None:
            value, self._spare = self._spare, None
            return value

        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        theta = 2.0 * math.pi * u2

        self._spare = r * math.sin(theta)
        return r * math.cos(theta)

    def normals(self, n: int, std: float = 1.0) -> np.ndarray:
        """*n* normal variates scaled by *std* as a real64 vector."""
        return np.array([self.normal() * std for _ in range(n)], dtype=np.float64)

    def sample(self, population: Sequence[T], k: int) -> List[T]:
        """ Draws *k* distinct items of *population* uniformly.

            The result is sorted ascending so callers get global index order.
        """
        pool = list(population)
        if k < 0 or k > len(pool):
            raise ValueError(f'Can not sample {k} of {len(pool)} items')

        for i in range(k):
            j = self.integers(i, len(pool))
            pool[i], pool[j] = pool[j], pool[i]

        return sorted(pool[:k])


def derive(seed: int, *labels: Union[int, str]) -> int:
    """ Derives an independent child seed from *seed* and *labels*.

        >>> derive(7, 'kv', 2, 4)   # participant 2, block 4

        String labels are folded in by their CRC-32.
    """
    state = seed & MASK64
    for label in labels:
        if isinstance(label, str):
            label = zlib.crc32(label.encode('utf-8'))

        salted = state ^ (((int(label) + 1) * GOLDEN_GAMMA) & MASK64)
        state = _mix64((salted + GOLDEN_GAMMA) & MASK64)

    return state


def generator(seed: int, *labels: Union[int, str]) -> Xoshiro256StarStar:
    """Shorthand for a generator over `derive(seed, *labels)`."""
    if not labels:
        return Xoshiro256StarStar(seed)

    return Xoshiro256StarStar(derive(seed, *labels))
