"""Portable random streams: splitmix64 seeding, xoshiro256++ uniforms, Box-Muller normals.

The generators here are fixed so that datasets are reproducible across
machines and implementations.  ``Xoshiro256pp`` is the scalar reference;
``LockstepXoshiro`` advances many independent streams at once with numpy
uint64 arithmetic and yields the exact same integer sequences.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_TWO_PI = 2.0 * math.pi
_INV_2_53 = 1.0 / (1 << 53)


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns ``(new_state, output)``."""
    state = (state + _GOLDEN) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def stream_state(seed: int, index: int = 0) -> list[int]:
    """xoshiro256++ state for stream ``index`` of ``seed`` (splitmix64 of ``seed ^ index``)."""
    sm = (seed ^ index) & MASK64
    words = []
    for _ in range(4):
        sm, out = splitmix64(sm)
        words.append(out)
    return words


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256pp:
    """Scalar xoshiro256++ generator."""

    def __init__(self, state: list[int]):
        if len(state) != 4 or not any(state):
            raise ValueError("xoshiro256++ needs four words, not all zero")
        self.s = [w & MASK64 for w in state]

    @classmethod
    def from_seed(cls, seed: int, index: int = 0) -> "Xoshiro256pp":
        return cls(stream_state(seed, index))

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s0 + s3) & MASK64, 23) + s0) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * _INV_2_53

    def normal_pair(self) -> tuple[float, float]:
        u1 = self.uniform()
        u2 = self.uniform()
        radius = math.sqrt(-2.0 * math.log(1.0 - u1))
        angle = _TWO_PI * u2
        return radius * math.cos(angle), radius * math.sin(angle)


_U64 = np.uint64


class LockstepXoshiro:
    """N independent xoshiro256++ streams advanced together."""

    def __init__(self, states: np.ndarray):
        states = np.asarray(states, dtype=np.uint64)
        if states.ndim != 2 or states.shape[1] != 4:
            raise ValueError("states must have shape (N, 4)")
        self.s = states.copy()

    @classmethod
    def from_scalar(cls, gens: list[Xoshiro256pp]) -> "LockstepXoshiro":
        return cls(np.array([g.s for g in gens], dtype=np.uint64))

    def next_u64(self) -> np.ndarray:
        s0, s1, s2, s3 = (self.s[:, k].copy() for k in range(4))
        x = s0 + s3
        result = ((x << _U64(23)) | (x >> _U64(41))) + s0
        t = s1 << _U64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = (s3 << _U64(45)) | (s3 >> _U64(19))
        self.s = np.stack([s0, s1, s2, s3], axis=1)
        return result

    def uniforms(self, count: int) -> np.ndarray:
        """Shape ``(N, count)``; column k is the k-th draw of every stream."""
        out = np.empty((self.s.shape[0], count), dtype=np.float64)
        for k in range(count):
            out[:, k] = (self.next_u64() >> _U64(11)).astype(np.float64) * _INV_2_53
        return out


def box_muller(u1: np.ndarray, u2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised counterpart of ``Xoshiro256pp.normal_pair``."""
    radius = np.sqrt(-2.0 * np.log(1.0 - u1))
    angle = _TWO_PI * u2
    return radius * np.cos(angle), radius * np.sin(angle)
