"""Pure-numpy kernel backend.

Implements the counter-based generator (Philox 2x64, 10 rounds) and the
Euler-Maruyama stepper with vectorized arithmetic.  The compiled backend
implements the identical algorithms; the integer stream and the uniform ->
normal map (shared cephes ndtri) agree bit for bit between backends.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtri

from ..coeffs import (
    OP_ABS,
    OP_ADD,
    OP_CONST,
    OP_COS,
    OP_DIV,
    OP_EXP,
    OP_MAX,
    OP_MIN,
    OP_MUL,
    OP_NEG,
    OP_POW,
    OP_SIN,
    OP_SUB,
    OP_T,
    OP_TANH,
    OP_X,
    Program,
)
from ..errors import SdeExplosionError

BACKEND_NAME = "python"

_MASK64 = 0xFFFFFFFFFFFFFFFF
_PHILOX_M = 0xD2B74407B1CE6E93
_PHILOX_W = 0x9E3779B97F4A7C15
_M_HI = np.uint64(_PHILOX_M >> 32)
_M_LO = np.uint64(_PHILOX_M & 0xFFFFFFFF)
_SHIFT32 = np.uint64(32)
_LOW32 = np.uint64(0xFFFFFFFF)
_TWO_NEG53 = 1.0 / 9007199254740992.0
_TWO_NEG54 = 1.0 / 18014398509481984.0


def _mulhi64(a: np.ndarray) -> np.ndarray:
    """High 64 bits of a * PHILOX_M for uint64 arrays."""
    a_hi = a >> _SHIFT32
    a_lo = a & _LOW32
    t = a_lo * _M_LO
    mid1 = a_hi * _M_LO + (t >> _SHIFT32)
    mid2 = a_lo * _M_HI + (mid1 & _LOW32)
    return a_hi * _M_HI + (mid1 >> _SHIFT32) + (mid2 >> _SHIFT32)


def philox_bits(ctr0, ctr1, key: int) -> np.ndarray:
    """Philox 2x64-10 output word x0 for counters (ctr0, ctr1) under ``key``."""
    x0 = np.asarray(ctr0, dtype=np.uint64).copy()
    x1 = np.broadcast_to(np.asarray(ctr1, dtype=np.uint64), x0.shape).copy()
    k = int(key) & _MASK64
    m = np.uint64(_PHILOX_M)
    for _ in range(10):
        lo = x0 * m
        hi = _mulhi64(x0)
        x0 = hi ^ np.uint64(k) ^ x1
        x1 = lo
        k = (k + _PHILOX_W) & _MASK64
    return x0


def bits_to_uniforms(bits: np.ndarray) -> np.ndarray:
    """Map uint64 words to float64 uniforms in the open interval (0, 1)."""
    return (bits >> np.uint64(11)).astype(np.float64) * _TWO_NEG53 + _TWO_NEG54


def normals(key: int, path_indices, draw_index: int) -> np.ndarray:
    """Standard normals for (path m, draw index) pairs, counter addressed."""
    bits = philox_bits(path_indices, np.uint64(draw_index), key)
    return ndtri(bits_to_uniforms(bits))


def eval_program(prog: Program, t: float, x: np.ndarray):
    """Evaluate a postfix program at scalar time ``t`` over states ``x`` (M, d).

    Returns an (M,) array, or a scalar when the program touches no state.
    """
    stack: list = [None] * max(prog.stack_size, 1)
    top = -1
    consts = prog.consts
    for code, arg in zip(prog.codes.tolist(), prog.args.tolist()):
        if code == OP_CONST:
            top += 1
            stack[top] = consts[arg]
        elif code == OP_T:
            top += 1
            stack[top] = t
        elif code == OP_X:
            top += 1
            stack[top] = x[:, arg]
        elif code == OP_NEG:
            stack[top] = np.negative(stack[top])
        elif code == OP_EXP:
            stack[top] = np.exp(stack[top])
        elif code == OP_TANH:
            stack[top] = np.tanh(stack[top])
        elif code == OP_SIN:
            stack[top] = np.sin(stack[top])
        elif code == OP_COS:
            stack[top] = np.cos(stack[top])
        elif code == OP_ABS:
            stack[top] = np.abs(stack[top])
        else:
            b = stack[top]
            top -= 1
            a = stack[top]
            if code == OP_ADD:
                stack[top] = np.add(a, b)
            elif code == OP_SUB:
                stack[top] = np.subtract(a, b)
            elif code == OP_MUL:
                stack[top] = np.multiply(a, b)
            elif code == OP_DIV:
                stack[top] = np.divide(a, b)
            elif code == OP_POW:
                stack[top] = np.power(a, b)
            elif code == OP_MIN:
                stack[top] = np.minimum(a, b)
            elif code == OP_MAX:
                stack[top] = np.maximum(a, b)
            else:
                raise AssertionError(f"bad opcode {code}")
    return stack[0]


class Stepper:
    """Euler-Maruyama stepper over compiled drift/diffusion programs."""

    def __init__(self, drift: list[Program], diffusion: list[list[Program]]):
        self.d = len(drift)
        self.dprime = len(diffusion[0])
        self.drift = drift
        self.diffusion = diffusion

    def paths(
        self,
        s: float,
        x0: np.ndarray,
        T: float,
        M: int,
        N: int,
        seed: int,
        escape: float,
        record_levels: np.ndarray,
    ) -> np.ndarray:
        d, dprime = self.d, self.dprime
        dt = (T - s) / N
        sqdt = math.sqrt(dt)
        slots = np.full(N + 1, -1, dtype=np.int64)
        slots[record_levels] = np.arange(len(record_levels))
        out = np.empty((M, len(record_levels), d))
        X = np.repeat(np.asarray(x0, dtype=float)[None, :], M, axis=0)
        if slots[0] >= 0:
            out[:, slots[0], :] = X
        m_idx = np.arange(M, dtype=np.uint64)
        esc2 = escape * escape
        with np.errstate(all="ignore"):
            for k in range(N):
                t_k = s + k * dt
                dW = np.empty((M, dprime))
                for j in range(dprime):
                    bits = philox_bits(m_idx, np.uint64(k * dprime + j), seed)
                    dW[:, j] = ndtri(bits_to_uniforms(bits)) * sqdt
                newX = np.empty_like(X)
                bvals = [eval_program(self.drift[i], t_k, X) for i in range(d)]
                svals = [
                    [eval_program(self.diffusion[i][j], t_k, X) for j in range(dprime)]
                    for i in range(d)
                ]
                for i in range(d):
                    acc = X[:, i] + bvals[i] * dt
                    for j in range(dprime):
                        acc = acc + svals[i][j] * dW[:, j]
                    newX[:, i] = acc
                norm2 = np.einsum("md,md->m", newX, newX)
                bad = ~np.isfinite(norm2) | (norm2 > esc2)
                if bad.any():
                    m_bad = int(np.argmax(bad))
                    raise SdeExplosionError(
                        m_bad, k + 1, t_k + dt, "state non-finite or outside escape radius"
                    )
                X = newX
                if slots[k + 1] >= 0:
                    out[:, slots[k + 1], :] = X
        return out
