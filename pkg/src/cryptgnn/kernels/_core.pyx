# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels for mod-(2^61 - 1) arithmetic.

Products of two 61-bit values need 122-bit intermediates, so these loops
use unsigned __int128 with a Mersenne fold. The numpy fallback in
numpy_impl.py implements the identical contracts.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef unsigned long long u64
cdef extern from *:
    ctypedef unsigned long long u128 "unsigned __int128"

cdef u64 Q = 0x1FFFFFFFFFFFFFFFULL  # 2^61 - 1


cdef inline u64 _mulmod(u64 a, u64 b) nogil:
    cdef u128 p = (<u128> a) * b
    cdef u64 r = <u64> ((p >> 61) + (p & Q))
    if r >= Q:
        r -= Q
    return r


cdef inline u64 _addmod(u64 a, u64 b) nogil:
    cdef u64 s = a + b
    if s >= Q:
        s -= Q
    return s


def mul_mod_flat(cnp.ndarray[cnp.uint64_t, ndim=1] a,
                 cnp.ndarray[cnp.uint64_t, ndim=1] b):
    cdef Py_ssize_t n = a.shape[0], i
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] out = np.empty(n, dtype=np.uint64)
    with nogil:
        for i in range(n):
            out[i] = _mulmod(a[i], b[i])
    return out


def matmul_mod(cnp.ndarray[cnp.uint64_t, ndim=2] a,
               cnp.ndarray[cnp.uint64_t, ndim=2] b):
    cdef Py_ssize_t n = a.shape[0], k = a.shape[1], m = b.shape[1]
    cdef Py_ssize_t i, j, t
    cdef cnp.ndarray[cnp.uint64_t, ndim=2] out = np.empty((n, m), dtype=np.uint64)
    cdef u128 acc, p
    cdef u64 r
    with nogil:
        for i in range(n):
            for j in range(m):
                acc = 0
                for t in range(k):
                    p = (<u128> a[i, t]) * b[t, j]
                    acc += (p >> 61) + (p & Q)  # < 2^62 per term
                r = <u64> ((acc >> 61) + (acc & Q))
                r = (r >> 61) + (r & Q)
                if r >= Q:
                    r -= Q
                out[i, j] = r
    return out


def inv_mod_flat(cnp.ndarray[cnp.uint64_t, ndim=1] a):
    """Elementwise inverse via the extended Euclidean algorithm.

    Bezout coefficients stay below the modulus, so signed 64-bit
    intermediates never overflow.
    """
    cdef Py_ssize_t n = a.shape[0], i
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] out = np.empty(n, dtype=np.uint64)
    cdef long long t0, t1, tn, r0, r1, rn, quot
    for i in range(n):
        if a[i] == 0:
            raise ZeroDivisionError("zero has no multiplicative inverse")
    with nogil:
        for i in range(n):
            r0 = <long long> Q
            r1 = <long long> a[i]
            t0 = 0
            t1 = 1
            while r1 != 0:
                quot = r0 / r1
                rn = r0 - quot * r1
                r0 = r1
                r1 = rn
                tn = t0 - quot * t1
                t0 = t1
                t1 = tn
            if t0 < 0:
                t0 += <long long> Q
            out[i] = <u64> t0
    return out


def add_rotate_stack(cnp.ndarray[cnp.uint64_t, ndim=3] stack,
                     cnp.ndarray[cnp.uint64_t, ndim=3] noise,
                     cnp.ndarray[cnp.uint64_t, ndim=1] shifts):
    """out[r, i, :] = (stack + noise)[r, (i - shifts[r]) mod N, :] mod q."""
    cdef Py_ssize_t nr = stack.shape[0], nn = stack.shape[1], nk = stack.shape[2]
    cdef Py_ssize_t r, i, j, src
    cdef u64 shift
    cdef cnp.ndarray[cnp.uint64_t, ndim=3] out = np.empty((nr, nn, nk), dtype=np.uint64)
    with nogil:
        for r in range(nr):
            shift = shifts[r] % <u64> nn
            for i in range(nn):
                src = i - <Py_ssize_t> shift
                if src < 0:
                    src += nn
                for j in range(nk):
                    out[r, i, j] = _addmod(stack[r, src, j], noise[r, src, j])
    return out
