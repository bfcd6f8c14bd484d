"""PCG32 (XSH-RR 64/32) generator and SplitMix64 seed mixing."""

from __future__ import annotations

MASK64 = (1 << 64) - 1
MASK32 = (1 << 32) - 1
MULTIPLIER = 6364136223846793005


def splitmix64(x):
    """One SplitMix64 output for state ``x``."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def mix_seed(base_seed, index):
    """Per-episode seed: SplitMix64 of ``base_seed XOR index``."""
    return splitmix64((base_seed ^ index) & MASK64)


class Pcg32:
    """Permuted congruential generator with 64-bit state and odd increment."""

    def __init__(self, seed=0, stream=54):
        self.state = 0
        self.increment = ((stream << 1) | 1) & MASK64
        self.next_u32()
        self.state = (self.state + seed) & MASK64
        self.next_u32()

    def next_u32(self):
        old = self.state
        self.state = (old * MULTIPLIER + self.increment) & MASK64
        xorshifted = (((old >> 18) ^ old) >> 27) & MASK32
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & MASK32

    def next_float(self):
        """Uniform in [0, 1) with 32 bits of resolution."""
        return self.next_u32() * (1.0 / 4294967296.0)

    def uniform(self, lo, hi):
        return lo + (hi - lo) * self.next_float()

    def next_below(self, bound):
        """Unbiased integer in [0, bound) by rejection of the short tail."""
        if bound < 1:
            raise ValueError("bound must be >= 1")
        threshold = (-bound % (1 << 32)) % bound
        while True:
            r = self.next_u32()
            if r >= threshold:
                return r % bound

    def sample(self, population, k):
        """``k`` distinct items, in draw order (partial Fisher-Yates)."""
        pool = list(population)
        if k > len(pool):
            raise ValueError(f"cannot draw {k} items from {len(pool)}")
        for i in range(k):
            j = i + self.next_below(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def shuffle(self, items):
        return self.sample(items, len(items))

    def floats(self, count):
        return [self.next_float() for _ in range(count)]
