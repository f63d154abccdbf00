# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel backend: Philox 2x64-10 counter RNG + Euler-Maruyama stepper.

Mirrors kernels._numpy operation for operation.  The integer stream and the
uniform -> normal map are bit-identical to the fallback (the normal inverse
CDF is the same cephes ndtri); path values can differ from the fallback by
an ulp only where transcendental coefficient functions are involved.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, exp, fabs, pow, sin, sqrt, tanh

from scipy.special.cython_special cimport ndtri

from ..errors import SdeExplosionError

cnp.import_array()

cdef extern from *:
    """
    #include <stdint.h>
    static inline uint64_t pl_mulhi64(uint64_t a, uint64_t b) {
        unsigned __int128 p = (unsigned __int128)a * (unsigned __int128)b;
        return (uint64_t)(p >> 64);
    }
    """
    ctypedef unsigned long long uint64_t
    uint64_t pl_mulhi64(uint64_t a, uint64_t b) nogil

BACKEND_NAME = "compiled"

cdef uint64_t PHILOX_M = <uint64_t>0xD2B74407B1CE6E93
cdef uint64_t PHILOX_W = <uint64_t>0x9E3779B97F4A7C15
cdef double TWO_NEG53 = 1.0 / 9007199254740992.0
cdef double TWO_NEG54 = 1.0 / 18014398509481984.0

DEF MAX_DIM = 16
DEF MAX_STACK = 64


cdef inline uint64_t philox_word(uint64_t c0, uint64_t c1, uint64_t key) nogil:
    cdef uint64_t x0 = c0
    cdef uint64_t x1 = c1
    cdef uint64_t k = key
    cdef uint64_t hi, lo
    cdef int r
    for r in range(10):
        lo = x0 * PHILOX_M
        hi = pl_mulhi64(x0, PHILOX_M)
        x0 = hi ^ k ^ x1
        x1 = lo
        k = k + PHILOX_W
    return x0


cdef inline double word_to_uniform(uint64_t bits) nogil:
    return (<double>(bits >> 11)) * TWO_NEG53 + TWO_NEG54


def philox_bits(ctr0, ctr1, key):
    """Vector Philox output words; matches the fallback bit for bit."""
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] c0 = np.ascontiguousarray(
        np.atleast_1d(np.asarray(ctr0, dtype=np.uint64)))
    cdef Py_ssize_t n = c0.shape[0]
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] c1 = np.ascontiguousarray(
        np.broadcast_to(np.asarray(ctr1, dtype=np.uint64), (n,)))
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] out = np.empty(n, dtype=np.uint64)
    cdef uint64_t k = <uint64_t>(int(key) & 0xFFFFFFFFFFFFFFFF)
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = philox_word(c0[i], c1[i], k)
    return out


def bits_to_uniforms(bits):
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] b = np.ascontiguousarray(
        np.atleast_1d(np.asarray(bits, dtype=np.uint64)))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(b.shape[0])
    cdef Py_ssize_t i
    for i in range(b.shape[0]):
        out[i] = word_to_uniform(b[i])
    return out


def normals(key, path_indices, draw_index):
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] m = np.ascontiguousarray(
        np.atleast_1d(np.asarray(path_indices, dtype=np.uint64)))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(m.shape[0])
    cdef uint64_t k = <uint64_t>(int(key) & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t ctr1 = <uint64_t>(int(draw_index))
    cdef Py_ssize_t i
    for i in range(m.shape[0]):
        out[i] = ndtri(word_to_uniform(philox_word(m[i], ctr1, k)))
    return out


cdef inline double eval_prog(const int* codes, const int* args, const double* consts,
                             int n, double t, const double* x) nogil:
    cdef double stack[MAX_STACK]
    cdef int top = -1
    cdef int i, c
    cdef double a, b
    for i in range(n):
        c = codes[i]
        if c == 0:    # CONST
            top += 1
            stack[top] = consts[args[i]]
        elif c == 1:  # T
            top += 1
            stack[top] = t
        elif c == 2:  # X
            top += 1
            stack[top] = x[args[i]]
        elif c == 8:  # NEG
            stack[top] = -stack[top]
        elif c == 9:
            stack[top] = exp(stack[top])
        elif c == 10:
            stack[top] = tanh(stack[top])
        elif c == 11:
            stack[top] = sin(stack[top])
        elif c == 12:
            stack[top] = cos(stack[top])
        elif c == 13:
            stack[top] = fabs(stack[top])
        else:
            b = stack[top]
            top -= 1
            a = stack[top]
            if c == 3:
                stack[top] = a + b
            elif c == 4:
                stack[top] = a - b
            elif c == 5:
                stack[top] = a * b
            elif c == 6:
                stack[top] = a / b
            elif c == 7:
                stack[top] = pow(a, b)
            elif c == 14:
                stack[top] = a if a < b else b
            else:
                stack[top] = a if a > b else b
    return stack[0]


MAX_DIM_LIMIT = MAX_DIM
MAX_STACK_LIMIT = MAX_STACK


def euler_paths(cnp.ndarray[cnp.int32_t, ndim=1] codes,
                 cnp.ndarray[cnp.int32_t, ndim=1] args,
                 cnp.ndarray[cnp.float64_t, ndim=1] consts,
                 cnp.ndarray[cnp.int32_t, ndim=1] offsets,
                 int d, int dprime,
                 double s, cnp.ndarray[cnp.float64_t, ndim=1] x0,
                 double T, int M, int N, object seed,
                 double escape, cnp.ndarray[cnp.int64_t, ndim=1] record_levels):
    cdef double dt = (T - s) / N
    cdef double sqdt = sqrt(dt)
    cdef int n_rec = record_levels.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] slots = np.full(N + 1, -1, dtype=np.int64)
    cdef Py_ssize_t r
    for r in range(n_rec):
        slots[<Py_ssize_t>record_levels[r]] = r
    cdef cnp.ndarray[cnp.float64_t, ndim=3] out = np.empty((M, n_rec, d))
    cdef double[:, :, ::1] o = out
    cdef const int* pc = <const int*>codes.data
    cdef const int* pa = <const int*>args.data
    cdef const double* pk = <const double*>consts.data
    cdef const int* po = <const int*>offsets.data
    cdef const long long* psl = <const long long*>slots.data
    cdef uint64_t key = <uint64_t>(int(seed))
    cdef double esc2 = escape * escape
    cdef double x[MAX_DIM]
    cdef double xn[MAX_DIM]
    cdef double dw[MAX_DIM]
    cdef double t_k, acc, bi, sij, norm2
    cdef int m, k, i, j, bad_step
    cdef long long slot
    bad_step = -1
    cdef double bad_t = 0.0
    cdef int bad_m = -1
    for m in range(M):
        for i in range(d):
            x[i] = x0[i]
        slot = psl[0]
        if slot >= 0:
            for i in range(d):
                o[m, slot, i] = x[i]
        for k in range(N):
            t_k = s + k * dt
            for j in range(dprime):
                dw[j] = ndtri(word_to_uniform(philox_word(
                    <uint64_t>m, <uint64_t>(k * dprime + j), key))) * sqdt
            for i in range(d):
                bi = eval_prog(pc + po[i], pa + po[i], pk, po[i + 1] - po[i], t_k, x)
                acc = x[i] + bi * dt
                for j in range(dprime):
                    sij = eval_prog(pc + po[d + i * dprime + j],
                                    pa + po[d + i * dprime + j], pk,
                                    po[d + i * dprime + j + 1] - po[d + i * dprime + j],
                                    t_k, x)
                    acc = acc + sij * dw[j]
                xn[i] = acc
            norm2 = 0.0
            for i in range(d):
                norm2 += xn[i] * xn[i]
            if not (norm2 <= esc2):  # catches NaN as well
                bad_m = m
                bad_step = k + 1
                bad_t = t_k + dt
                break
            for i in range(d):
                x[i] = xn[i]
            slot = psl[k + 1]
            if slot >= 0:
                for i in range(d):
                    o[m, slot, i] = x[i]
        if bad_m >= 0:
            break
    if bad_m >= 0:
        raise SdeExplosionError(bad_m, bad_step, bad_t,
                                "state non-finite or outside escape radius")
    return out
