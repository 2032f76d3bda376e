"""Seeded xorshift64* generator, vectorised over independent lanes.

Each call consumes whole rounds of all lanes, so the stream depends only on
the seed and on the sequence of requested sizes.
"""

from __future__ import annotations

import hashlib

import numpy as np

_LANES = 1024
_MASK = (1 << 64) - 1
_MULT = np.uint64(0x2545F4914F6CDD1D)


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


class XorShiftRNG:
    def __init__(self, seed: int):
        self.seed = int(seed)
        state = self.seed & _MASK
        lanes = []
        for _ in range(_LANES):
            state, z = _splitmix64(state)
            lanes.append(z or 1)
        self._state = np.array(lanes, dtype=np.uint64)

    def spawn(self, tag: str) -> "XorShiftRNG":
        """Independent child stream keyed by ``tag``."""
        digest = hashlib.sha256(f"{self.seed}:{tag}".encode()).digest()
        return XorShiftRNG(int.from_bytes(digest[:8], "little"))

    def next_u64(self, n: int) -> np.ndarray:
        rounds = -(-n // _LANES)
        out = np.empty((rounds, _LANES), dtype=np.uint64)
        s = self._state
        for r in range(rounds):
            s ^= s >> np.uint64(12)
            s ^= s << np.uint64(25)
            s ^= s >> np.uint64(27)
            out[r] = s * _MULT
        return out.reshape(-1)[:n]

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0, dtype=np.float64) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return (low + (high - low) * u).reshape(shape).astype(dtype)

    def normal(self, shape=(), dtype=np.float64) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = -(-n // 2)
        u1 = 1.0 - self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        return z.reshape(shape).astype(dtype)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        u = self.uniform(shape)
        return (low + np.floor(u * (high - low))).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, n: int, size: int) -> np.ndarray:
        return self.integers(0, n, size)
