# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops.

Must stay bit-for-bit compatible with ``memtangle._fallback`` for the
integer kernels; ``trialwise_rows`` agrees to rounding.
"""
from libc.math cimport sqrt, NAN
from libc.stdint cimport uint32_t, uint64_t, int64_t

cdef uint64_t PCG_MULT = 6364136223846793005ULL


cdef inline uint32_t _output(uint64_t old) nogil:
    cdef uint32_t xorshifted = <uint32_t>(((old >> 18) ^ old) >> 27)
    cdef uint32_t rot = <uint32_t>(old >> 59)
    return (xorshifted >> rot) | (xorshifted << ((-rot) & 31))


def pcg32_fill(uint64_t state, uint64_t inc, uint32_t[::1] out):
    """Fill ``out`` with successive PCG32 outputs; return the advanced state."""
    cdef Py_ssize_t i, n = out.shape[0]
    cdef uint64_t old
    with nogil:
        for i in range(n):
            old = state
            state = old * PCG_MULT + inc
            out[i] = _output(old)
    return state


cdef inline uint32_t _bounded(uint64_t* state, uint64_t inc, uint32_t bound) nogil:
    cdef uint32_t threshold = (-bound) % bound
    cdef uint32_t r
    cdef uint64_t old
    while True:
        old = state[0]
        state[0] = old * PCG_MULT + inc
        r = _output(old)
        if r >= threshold:
            return r % bound


def pcg32_shuffle(uint64_t state, uint64_t inc, int64_t[::1] arr):
    """In-place Fisher-Yates (high index down); return the advanced state."""
    cdef Py_ssize_t i, n = arr.shape[0]
    cdef uint32_t j
    cdef int64_t tmp
    with nogil:
        i = n - 1
        while i > 0:
            j = _bounded(&state, inc, <uint32_t>(i + 1))
            tmp = arr[i]
            arr[i] = arr[j]
            arr[j] = tmp
            i -= 1
    return state


def trialwise_rows(double[:, ::1] rdm_c, double[:, ::1] rdm_f, Py_ssize_t k,
                   double[::1] out):
    """Pearson of row t of ``rdm_c`` against row t+k of ``rdm_f``.

    Columns t and t+k are left out of both rows. Returns the number of rows
    whose correlation was undefined (constant after exclusion); those slots
    are set to NaN.
    """
    cdef Py_ssize_t n = rdm_c.shape[0]
    cdef Py_ssize_t t, j, u, cnt
    cdef double sx, sy, mx, my, dx, dy, sxx, syy, sxy, r
    cdef int bad = 0
    with nogil:
        for t in range(n - k):
            u = t + k
            sx = 0.0
            sy = 0.0
            cnt = 0
            for j in range(n):
                if j == t or j == u:
                    continue
                sx += rdm_c[t, j]
                sy += rdm_f[u, j]
                cnt += 1
            mx = sx / cnt
            my = sy / cnt
            sxx = 0.0
            syy = 0.0
            sxy = 0.0
            for j in range(n):
                if j == t or j == u:
                    continue
                dx = rdm_c[t, j] - mx
                dy = rdm_f[u, j] - my
                sxx += dx * dx
                syy += dy * dy
                sxy += dx * dy
            if sxx <= 0.0 or syy <= 0.0:
                out[t] = NAN
                bad += 1
                continue
            r = sxy / sqrt(sxx * syy)
            if r > 1.0:
                r = 1.0
            elif r < -1.0:
                r = -1.0
            out[t] = r
    return bad
