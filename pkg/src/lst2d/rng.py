"""SplitMix64 pseudo-random generator.

Used for shuffling and weight initialization so that runs can be reproduced
bit-for-bit by any implementation. State update and output mixing, all
arithmetic modulo 2**64::

    state  = state + 0x9E3779B97F4A7C15
    z      = state
    z      = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z      = (z ^ (z >> 27)) * 0x94D049BB133111EB
    output = z ^ (z >> 31)

Derived draws:

* ``below(n)``: ``(output * n) >> 64`` (multiply-high), an integer in ``[0, n)``.
* ``uniform()``: ``(output >> 11) * 2**-53``, a double in ``[0, 1)``.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        return (self.next_u64() * n) >> 64

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * 2.0**-53

    def uniform_array(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        count = int(np.prod(shape))
        u = np.array([self.uniform() for _ in range(count)], dtype=np.float64)
        return (low + (high - low) * u).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``0..n-1``, swapping from the top index down."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return np.array(perm, dtype=np.int64)


def derive_seed(seed: int, *salt: int) -> int:
    """Mix extra integers into a seed so independent streams do not overlap."""
    gen = SplitMix64(seed)
    out = gen.next_u64()
    for s in salt:
        gen = SplitMix64(out ^ (s & _MASK))
        out = gen.next_u64()
    return out
