"""Seeded PCG32 streams.

Algorithm (portable, reproducible in any language):

* ``splitmix64``: ``x += 0x9E3779B97F4A7C15``, then the usual two
  xor-shift-multiply rounds and a final ``z ^ (z >> 31)``.
* A stream for ``(seed, purpose)`` is PCG32 XSH-RR seeded with
  ``initstate = splitmix64(seed)`` (first output) and
  ``initseq = fnv1a64(purpose.encode("utf-8"))``, following the reference
  ``pcg32_srandom_r``: ``inc = (initseq << 1) | 1``; state 0; step;
  add initstate; step.
* ``uniform``: ``(u32 + 0.5) / 2**32``, strictly inside (0, 1).
* ``normal``: Box-Muller on consecutive uniform pairs ``(u1, u2)``:
  ``r = sqrt(-2 ln u1)``, emitting ``r cos(2 pi u2)`` then ``r sin(2 pi u2)``.
  An odd request still consumes a whole pair.
* ``bounded(b)``: reject outputs below ``2**32 mod b``, return ``r mod b``.
* ``shuffle``: Fisher-Yates from the last index down, ``j = bounded(i + 1)``.
"""
from __future__ import annotations

import numpy as np

from ._backend import kernels

MASK64 = (1 << 64) - 1
PCG_MULT = 6364136223846793005


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step: returns (output, new_state)."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31), x


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


class Pcg32:
    """PCG32 generator. Use :meth:`stream` to build one from a seed and a purpose."""

    def __init__(self, initstate: int, initseq: int, backend=None):
        self._k = backend if backend is not None else kernels
        self.inc = ((initseq << 1) | 1) & MASK64
        self.state = 0
        self.next_u32()
        self.state = (self.state + initstate) & MASK64
        self.next_u32()

    @classmethod
    def stream(cls, seed: int, purpose: str, backend=None) -> "Pcg32":
        if not 0 <= seed <= MASK64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        initstate, _ = splitmix64(seed)
        return cls(initstate, fnv1a64(purpose.encode("utf-8")), backend=backend)

    def next_u32(self) -> int:
        old = self.state
        self.state = (old * PCG_MULT + self.inc) & MASK64
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def u32(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.uint32)
        self.state = int(self._k.pcg32_fill(self.state, self.inc, out))
        return out

    def uniform(self, n: int) -> np.ndarray:
        return (self.u32(n).astype(np.float64) + 0.5) * (1.0 / 4294967296.0)

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log(u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2), dtype=np.float64)
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        return z.reshape(-1)[:n]

    def bounded(self, bound: int) -> int:
        if not 0 < bound <= 0xFFFFFFFF:
            raise ValueError(f"bound out of range: {bound}")
        threshold = ((1 << 32) - bound) % bound
        while True:
            r = self.next_u32()
            if r >= threshold:
                return r % bound

    def shuffle(self, arr: np.ndarray) -> np.ndarray:
        """Shuffle an int64 array in place (and return it)."""
        if arr.dtype != np.int64 or not arr.flags.c_contiguous:
            raise TypeError("shuffle expects a contiguous int64 array")
        self.state = int(self._k.pcg32_shuffle(self.state, self.inc, arr))
        return arr

    def permutation(self, n: int) -> np.ndarray:
        return self.shuffle(np.arange(n, dtype=np.int64))
