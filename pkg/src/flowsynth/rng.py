"""Deterministic random number generation.

xoshiro256++ seeded through splitmix64: the same seed produces the same
stream on every platform, which is what makes checkpoints, samples and
evaluation reports byte-reproducible. All randomness in the package flows
through one master seed; independent consumers get sub-streams via
`derive_seed(seed, label)` so adding a new consumer never perturbs the
streams of existing ones.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, (z ^ (z >> 31)) & _MASK64


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash; stable across platforms and runs."""
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & _MASK64
    return h


def derive_seed(seed: int, label: str) -> int:
    """Labeled sub-seed: hash(seed, label), stable across runs."""
    _, mixed = splitmix64((seed & _MASK64) ^ fnv1a64(label.encode("utf-8")))
    return mixed


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Rng:
    """xoshiro256++ generator with vectorized fill helpers."""

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        state = self.seed
        s = []
        for _ in range(4):
            state, out = splitmix64(state)
            s.append(out)
        self._s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s0 + s3) & _MASK64, 23) + s0) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        """Float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def uniforms(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        nxt = self.next_u64
        for i in range(n):
            out[i] = (nxt() >> 11) * 2.0**-53
        return out

    def normals(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller on consecutive uniform pairs."""
        pairs = (n + 1) // 2
        u = np.empty(2 * pairs, dtype=np.float64)
        nxt = self.next_u64
        for i in range(2 * pairs):
            u[i] = (nxt() >> 11) * 2.0**-53
        u1 = u[0::2] + 2.0**-54  # keep log() off zero
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return z[:n]

    def normal_matrix(self, shape: tuple[int, ...], scale: float = 1.0) -> np.ndarray:
        return (self.normals(int(np.prod(shape))) * scale).reshape(shape)

    def uniform_matrix(self, shape: tuple[int, ...], low: float, high: float) -> np.ndarray:
        u = self.uniforms(int(np.prod(shape)))
        return (low + (high - low) * u).reshape(shape)

    def randbelow(self, n: int) -> int:
        """Integer in [0, n) via Lemire multiply-shift (bias < n / 2**64)."""
        return (self.next_u64() * n) >> 64

    def integers(self, n_draws: int, upper: int) -> np.ndarray:
        out = np.empty(n_draws, dtype=np.int64)
        nxt = self.next_u64
        for i in range(n_draws):
            out[i] = (nxt() * upper) >> 64
        return out

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        nxt = self.next_u64
        for i in range(n - 1, 0, -1):
            j = (nxt() * (i + 1)) >> 64
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def split(self, label: str) -> "Rng":
        """Independent sub-stream keyed by (this seed, label)."""
        return Rng(derive_seed(self.seed, label))
