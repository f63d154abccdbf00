"""Flattening of postfix programs into the arrays the compiled kernel consumes."""

from __future__ import annotations

import numpy as np

from ..coeffs import OP_CONST, Program


def pack_programs(drift: list[Program], diffusion: list[list[Program]], max_stack: int):
    """Concatenate drift then row-major diffusion programs into flat arrays.

    Returns (codes, args, consts, offsets); constant indices are shifted into
    the shared constant pool.
    """
    d = len(drift)
    dprime = len(diffusion[0])
    progs = list(drift) + [diffusion[i][j] for i in range(d) for j in range(dprime)]
    for p in progs:
        if p.stack_size > max_stack:
            raise ValueError(f"expression too deep for compiled stepper: {p.source!r}")
    codes = np.concatenate([p.codes for p in progs]).astype(np.int32)
    args = []
    consts: list[float] = []
    offsets = [0]
    for p in progs:
        shifted = p.args.copy()
        shifted[p.codes == OP_CONST] += len(consts)
        args.append(shifted)
        consts.extend(p.consts.tolist())
        offsets.append(offsets[-1] + len(p.codes))
    const_arr = np.asarray(consts if consts else [0.0], dtype=np.float64)
    return (
        codes,
        np.concatenate(args).astype(np.int32),
        const_arr,
        np.asarray(offsets, dtype=np.int32),
    )


class CompiledStepper:
    """Euler-Maruyama stepper dispatching to the Cython kernel."""

    def __init__(self, drift: list[Program], diffusion: list[list[Program]]):
        from . import _compiled

        self._kernel = _compiled
        self.d = len(drift)
        self.dprime = len(diffusion[0])
        if self.d > _compiled.MAX_DIM_LIMIT or self.dprime > _compiled.MAX_DIM_LIMIT:
            raise ValueError(
                f"compiled stepper supports at most {_compiled.MAX_DIM_LIMIT} dimensions"
            )
        self._codes, self._args, self._consts, self._offsets = pack_programs(
            drift, diffusion, _compiled.MAX_STACK_LIMIT
        )

    def paths(self, s, x0, T, M, N, seed, escape, record_levels):
        return self._kernel.euler_paths(
            self._codes,
            self._args,
            self._consts,
            self._offsets,
            self.d,
            self.dprime,
            float(s),
            np.ascontiguousarray(np.asarray(x0, dtype=np.float64)),
            float(T),
            int(M),
            int(N),
            int(seed) & 0xFFFFFFFFFFFFFFFF,
            float(escape),
            np.ascontiguousarray(np.asarray(record_levels, dtype=np.int64)),
        )
