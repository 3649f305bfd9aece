"""Portable deterministic PRNG used for shot sampling, shuffling, and init.

xorshift64* stream seeded through the splitmix64 finalizer. All arithmetic
is mod 2^64 with fixed constants, so any implementation language reproduces
the same draws bit for bit. Not cryptographic.
"""

from __future__ import annotations

_M64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_STAR = 0x2545F4914F6CDD1D


def mix64(z: int) -> int:
    """splitmix64 finalizer: avalanches a 64-bit value."""
    z &= _M64
    z = ((z ^ (z >> 30)) * _MIX1) & _M64
    z = ((z ^ (z >> 27)) * _MIX2) & _M64
    return z ^ (z >> 31)


class Rng:
    """xorshift64* generator; (seed, stream) pairs give independent streams."""

    def __init__(self, seed: int, stream: int = 0):
        state = mix64((seed & _M64) + ((stream + 1) * _GOLDEN & _M64))
        # xorshift state must be nonzero
        self.state = state if state != 0 else _GOLDEN

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & _M64
        x ^= x >> 27
        self.state = x
        return (x * _STAR) & _M64

    def randbelow(self, n: int) -> int:
        """Uniform-ish integer in [0, n) via modulo (documented, portable)."""
        if n <= 0:
            raise ValueError("randbelow requires n >= 1")
        return self.next_u64() % n

    def uniform(self) -> float:
        """Float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates, descending index order."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample(self, items: list, k: int) -> list:
        """First k of a shuffled copy, sorted. Callers pass unique indices."""
        pool = list(items)
        self.shuffle(pool)
        return sorted(pool[: min(k, len(pool))])
