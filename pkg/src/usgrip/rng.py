"""SplitMix64, the only generator used to build datasets.

The n-th output (0-based) of a generator seeded with ``s`` is
``mix(s + (n + 1) * 0x9E3779B97F4A7C15 mod 2**64)`` where ``mix`` is the
standard SplitMix64 finaliser (shifts 30/27/31, multipliers
0xBF58476D1CE4E5B9 and 0x94D049BB133111EB). Because the stream is a pure
function of (seed, index), any element can be computed directly, which the
vectorised and compiled paths below rely on.
"""

import numpy as np
from numba import njit

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
INV_2_53 = 1.0 / (1 << 53)


def mix64(z):
    z &= MASK64
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def splitmix64_at(seed, index):
    return mix64((seed + (index + 1) * GOLDEN) & MASK64)


def derive_key(seed, *path):
    """Child seed for a labelled sub-stream, e.g. ``derive_key(seed, FRAME, k)``."""
    key = seed & MASK64
    for p in path:
        key = splitmix64_at(key ^ (p & MASK64), 0)
    return key


class SplitMix64:
    """Sequential interface over the same stream."""

    def __init__(self, seed):
        self.state = seed & MASK64

    def next_u64(self):
        self.state = (self.state + GOLDEN) & MASK64
        return mix64(self.state)

    def uniform(self):
        """Float in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * INV_2_53

    def randbelow(self, n):
        """Integer in [0, n) by multiply-shift."""
        return (self.next_u64() * n) >> 64

    def shuffle(self, items):
        """In-place Fisher-Yates, last position first."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]
        return items


@njit(cache=True)
def _mix_nb(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def uniform_at(key, index):
    """Compiled twin of ``(splitmix64_at(key, index) >> 11) * 2**-53``."""
    z = _mix_nb(np.uint64(key) + (np.uint64(index) + np.uint64(1)) * np.uint64(GOLDEN))
    return float(z >> np.uint64(11)) * INV_2_53


def uniform_array(key, n):
    """First ``n`` uniforms of stream ``key`` as float64, vectorised."""
    idx = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(key) + idx * np.uint64(GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
        z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * INV_2_53
