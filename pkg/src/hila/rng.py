"""Deterministic, platform-independent pseudo-random number generation.

The generator is fully specified here so that datasets and initializations
are reproducible bit-for-bit across runs and platforms:

* Seeding uses SplitMix64: state advances by the constant
  ``GOLDEN = 0x9E3779B97F4A7C15`` and each output is the finalizer
  ``z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27;
  z *= 0x94D049BB133111EB; z ^= z >> 31`` (all mod 2**64).
* The bulk generator is xoshiro256** run as ``LANES = 64`` interleaved
  lanes. Lane ``j`` is seeded with four consecutive SplitMix64 outputs
  (lanes seeded in order j = 0..63). Output value ``i`` of the logical
  stream is lane ``i % 64`` at step ``i // 64``.
* ``uniform`` maps a 64-bit word to [0, 1) as ``(word >> 11) * 2**-53``.
* ``normal`` uses the Box-Muller transform on uniform pairs, with
  ``u1`` shifted to (0, 1] as ``((word >> 11) + 1) * 2**-53``.
* ``integers(lo, hi)`` reduces a word modulo ``hi - lo``. The modulo bias
  is negligible for the small ranges used here and keeps the mapping
  trivially portable.

Substream derivation: ``derive_seed(root, index)`` returns the SplitMix64
finalizer applied to ``root + (index + 1) * GOLDEN`` (mod 2**64).
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
LANES = 64

_U64 = np.uint64


def _mix64(z: int) -> int:
    z &= MASK64
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & MASK64
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & MASK64
    z ^= z >> 31
    return z


def splitmix64(seed: int, n: int) -> list[int]:
    """First ``n`` outputs of SplitMix64 started at ``seed``."""
    out = []
    state = seed & MASK64
    for _ in range(n):
        state = (state + GOLDEN) & MASK64
        out.append(_mix64(state))
    return out


def derive_seed(root: int, index: int) -> int:
    """Deterministic child seed for substream ``index``."""
    return _mix64((root + (index + 1) * GOLDEN) & MASK64)


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << _U64(k)) | (x >> _U64(64 - k))


class Stream:
    """xoshiro256** bulk generator with 64 interleaved lanes."""

    def __init__(self, seed: int):
        words = splitmix64(seed, 4 * LANES)
        state = np.array(words, dtype=np.uint64).reshape(LANES, 4)
        self._s = [state[:, i].copy() for i in range(4)]
        self._buf = np.empty(0, dtype=np.uint64)

    def _next_block(self) -> np.ndarray:
        s0, s1, s2, s3 = self._s
        result = _rotl(s1 * _U64(5), 7) * _U64(9)
        t = s1 << _U64(17)
        s2 = s2 ^ s0
        s3 = s3 ^ s1
        s1 = s1 ^ s2
        s0 = s0 ^ s3
        s2 = s2 ^ t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def next_u64(self, n: int) -> np.ndarray:
        while self._buf.size < n:
            self._buf = np.concatenate([self._buf, self._next_block()])
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def uniform(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        vals = (self.next_u64(n) >> _U64(11)).astype(np.float64) * 2.0**-53
        return vals.reshape(shape) if shape else vals[0]

    def normal(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        half = (n + 1) // 2
        w1 = ((self.next_u64(half) >> _U64(11)).astype(np.float64) + 1.0) * 2.0**-53
        w2 = (self.next_u64(half) >> _U64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(w1))
        theta = 2.0 * np.pi * w2
        vals = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return vals.reshape(shape) if shape else vals[0]

    def integers(self, lo: int, hi: int, shape=()) -> np.ndarray:
        if hi <= lo:
            raise ValueError(f"empty integer range [{lo}, {hi})")
        n = int(np.prod(shape)) if shape else 1
        span = _U64(hi - lo)
        vals = (self.next_u64(n) % span).astype(np.int64) + lo
        return vals.reshape(shape) if shape else int(vals[0])

    def trunc_normal(self, shape, std: float = 1.0, bound: float = 2.0) -> np.ndarray:
        """Normal samples with |z| > bound redrawn, scaled by ``std``."""
        vals = self.normal(shape)
        flat = vals.reshape(-1)
        bad = np.abs(flat) > bound
        while bad.any():
            flat[bad] = self.normal((int(bad.sum()),))
            bad = np.abs(flat) > bound
        return flat.reshape(shape) * std
