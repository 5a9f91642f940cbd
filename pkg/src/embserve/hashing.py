"""Portable 64-bit hash and pseudo-random primitives.

Everything that must be reproducible across runs and platforms (synthetic
embeddings, coverage selection, scheduler choices) is derived from these
two functions, so their exact bit-level behaviour is part of the contract.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def fnv1a64(data: bytes | str) -> int:
    """64-bit FNV-1a over raw bytes (str is encoded as UTF-8)."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def splitmix64(x: int) -> int:
    """Single splitmix64 finalization step applied to ``x + gamma``."""
    z = (x + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """The splitmix64 stream generator.

    ``next()`` advances the state by the golden gamma and returns the mixed
    value, i.e. the k-th output equals ``splitmix64(seed + (k-1)*gamma)``.
    """

    __slots__ = ("state",)

    def __init__(self, seed: int) -> None:
        self.state = seed & MASK64

    def next(self) -> int:
        out = splitmix64(self.state)
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return out

    def below(self, n: int) -> int:
        """Uniform-ish integer in ``[0, n)`` (plain modulo reduction)."""
        if n <= 0:
            raise ValueError("n must be positive")
        return self.next() % n

    def unit(self) -> float:
        """Float in ``[0, 1)`` built from the top 53 bits."""
        return (self.next() >> 11) / 9007199254740992.0

    def signed_unit(self) -> float:
        """Float in ``[-1, 1)`` using the same mapping as the hashed trainer."""
        return self.next() / 9223372036854775808.0 - 1.0
