"""Seedable xoshiro256** generator, seeded through SplitMix64.

Every stochastic operation in the package takes one of these explicitly so
runs are reproducible bit-for-bit and the state can be checkpointed.
"""

from __future__ import annotations

import math

import numpy as np

_MASK = (1 << 64) - 1


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


def splitmix64(state: int) -> tuple[int, int]:
    """Return ``(next_state, output)`` for one SplitMix64 step."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


class Xoshiro256:
    def __init__(self, seed: int = 0):
        sm = seed & _MASK
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self.s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """Float in [0, 1) with 24 bits of resolution (exact in float32)."""
        return (self.next_u64() >> 40) * (1.0 / (1 << 24))

    def uniform53(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniforms(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = (self.next_u64() >> 40) * (1.0 / (1 << 24))
        return out

    def integers(self, high: int) -> int:
        """Uniform integer in [0, high) by rejection (no modulo bias)."""
        if high <= 0:
            raise ValueError("high must be positive")
        limit = (1 << 64) - ((1 << 64) % high)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % high

    def normal(self) -> float:
        # Box-Muller, one output per call so the stream position is simple
        u1 = self.uniform53()
        u2 = self.uniform53()
        return math.sqrt(-2.0 * math.log1p(-u1)) * math.cos(2.0 * math.pi * u2)

    def truncated_normals(self, n: int, std: float, bound: float = 2.0) -> np.ndarray:
        """``n`` draws of N(0, std^2) rejected outside ``(-bound*std, bound*std)``."""
        out = np.empty(n, dtype=np.float64)
        i = 0
        while i < n:
            z = self.normal()
            if -bound < z < bound:
                out[i] = z * std
                i += 1
        return out

    def get_state(self) -> bytes:
        return b"".join(x.to_bytes(8, "little") for x in self.s)

    def set_state(self, blob: bytes) -> None:
        if len(blob) != 32:
            raise ValueError(f"xoshiro256 state must be 32 bytes, got {len(blob)}")
        self.s = [int.from_bytes(blob[i : i + 8], "little") for i in range(0, 32, 8)]

    def spawn(self) -> "Xoshiro256":
        """Child generator seeded from the next output of this one."""
        return Xoshiro256(self.next_u64())
