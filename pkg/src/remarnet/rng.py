"""Portable pseudo-random streams: splitmix64 seeding a xoshiro256** generator.

Every stochastic choice in a run (splits, prototypes, shuffles, weight init,
synthetic noise) draws from a named substream of a single run seed, so results
do not depend on numpy's generator internals.
"""

import math

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def _mix64(z):
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & MASK64
    return z ^ (z >> 31)


def splitmix64(seed, index=0):
    """Return output number ``index`` of the splitmix64 sequence started at ``seed``."""
    return _mix64((seed + (index + 1) * GOLDEN_GAMMA) & MASK64)


def _fnv1a64(text):
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & MASK64
    return h


def derive_seed(seed, *parts):
    """Fold integers and names into ``seed``; used for round and epoch seeds."""
    s = seed & MASK64
    for part in parts:
        key = _fnv1a64(part) if isinstance(part, str) else part & MASK64
        s = splitmix64(s ^ key)
    return s


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    """xoshiro256** with splitmix64 state expansion."""

    def __init__(self, seed):
        seed &= MASK64
        self.s = [splitmix64(seed, i) for i in range(4)]
        if not any(self.s):  # all-zero state is a fixed point
            self.s[0] = 1

    @classmethod
    def stream(cls, seed, name):
        return cls(derive_seed(seed, name))

    def next_u64(self):
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def random(self):
        """Uniform double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randbelow(self, n):
        """Unbiased integer in [0, n) by rejection."""
        if n <= 0:
            raise ValueError("randbelow needs n >= 1")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def uniform_array(self, count, low=0.0, high=1.0):
        out = np.empty(count, dtype=np.float64)
        span = high - low
        for i in range(count):
            out[i] = low + span * self.random()
        return out

    def normal_array(self, count):
        """Standard normals by Box-Muller, consuming two uniforms per pair."""
        out = np.empty(count, dtype=np.float64)
        i = 0
        while i < count:
            u1 = 1.0 - self.random()  # (0, 1]
            u2 = self.random()
            radius = math.sqrt(-2.0 * math.log(u1))
            theta = 2.0 * math.pi * u2
            out[i] = radius * math.cos(theta)
            if i + 1 < count:
                out[i + 1] = radius * math.sin(theta)
            i += 2
        return out

    def permutation(self, n):
        """Fisher-Yates shuffle of range(n)."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return np.array(perm, dtype=np.int64)
