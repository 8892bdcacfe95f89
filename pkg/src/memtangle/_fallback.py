"""Pure numpy implementations of the kernels in ``_kernels.pyx``.

The PCG32 stream is produced without a Python-level loop: LCG states are
an affine function of the start state, ``s_i = a**i * s_0 + c_i (mod 2**64)``,
so a block of states is one multiply-add against precomputed ``(a**i, c_i)``
tables. uint64 array arithmetic in numpy wraps modulo 2**64, which is exactly
the LCG modulus.
"""
from __future__ import annotations

import numpy as np

PCG_MULT = 6364136223846793005
MASK64 = (1 << 64) - 1
_BLOCK = 1 << 16

_tables: dict[int, tuple[np.ndarray, np.ndarray, int, int]] = {}


def _jump_tables(inc: int) -> tuple[np.ndarray, np.ndarray, int, int]:
    """Return (A, C, A_B, C_B): per-offset multipliers/addends and the full-block step."""
    cached = _tables.get(inc)
    if cached is not None:
        return cached
    mult = np.empty(_BLOCK, dtype=np.uint64)
    add = np.empty(_BLOCK, dtype=np.uint64)
    mult[0] = 1
    add[0] = 0
    step_a, step_c = PCG_MULT, inc
    filled = 1
    while filled < _BLOCK:
        # (step_a, step_c) advances a state by `filled` positions
        mult[filled : 2 * filled] = mult[:filled] * np.uint64(step_a)
        add[filled : 2 * filled] = add[:filled] * np.uint64(step_a) + np.uint64(step_c)
        step_c = (step_c * (step_a + 1)) & MASK64
        step_a = (step_a * step_a) & MASK64
        filled *= 2
    out = (mult, add, step_a, step_c)
    if len(_tables) > 64:
        _tables.clear()
    _tables[inc] = out
    return out


def _output(old: np.ndarray) -> np.ndarray:
    xorshifted = (((old >> np.uint64(18)) ^ old) >> np.uint64(27)) & np.uint64(0xFFFFFFFF)
    rot = old >> np.uint64(59)
    left = (np.uint64(32) - rot) & np.uint64(31)
    out = (xorshifted >> rot) | (xorshifted << left)
    return (out & np.uint64(0xFFFFFFFF)).astype(np.uint32)


def pcg32_fill(state: int, inc: int, out: np.ndarray) -> int:
    n = out.shape[0]
    if n == 0:
        return state
    mult, add, step_a, step_c = _jump_tables(inc)
    pos = 0
    while pos < n:
        take = min(_BLOCK, n - pos)
        states = mult[:take] * np.uint64(state) + add[:take]
        out[pos : pos + take] = _output(states)
        if take == _BLOCK:
            state = (step_a * state + step_c) & MASK64
        else:
            state = (int(states[take - 1]) * PCG_MULT + inc) & MASK64
        pos += take
    return state


def _step(state: int, inc: int) -> tuple[int, int]:
    old = state
    state = (old * PCG_MULT + inc) & MASK64
    xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
    rot = old >> 59
    return state, ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF


def pcg32_shuffle(state: int, inc: int, arr: np.ndarray) -> int:
    i = arr.shape[0] - 1
    while i > 0:
        bound = i + 1
        threshold = ((1 << 32) - bound) % bound
        while True:
            state, r = _step(state, inc)
            if r >= threshold:
                break
        j = r % bound
        arr[i], arr[j] = arr[j], arr[i]
        i -= 1
    return state


def trialwise_rows(rdm_c: np.ndarray, rdm_f: np.ndarray, k: int, out: np.ndarray) -> int:
    n = rdm_c.shape[0]
    rows = n - k
    x = rdm_c[:rows]
    y = rdm_f[k:]
    keep = np.ones((rows, n), dtype=bool)
    idx = np.arange(rows)
    keep[idx, idx] = False
    keep[idx, idx + k] = False
    cnt = keep.sum(axis=1)
    mx = np.where(keep, x, 0.0).sum(axis=1) / cnt
    my = np.where(keep, y, 0.0).sum(axis=1) / cnt
    dx = np.where(keep, x - mx[:, None], 0.0)
    dy = np.where(keep, y - my[:, None], 0.0)
    sxx = (dx * dx).sum(axis=1)
    syy = (dy * dy).sum(axis=1)
    sxy = (dx * dy).sum(axis=1)
    bad = (sxx <= 0.0) | (syy <= 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.clip(sxy / np.sqrt(sxx * syy), -1.0, 1.0)
    r[bad] = np.nan
    out[:rows] = r
    return int(bad.sum())
