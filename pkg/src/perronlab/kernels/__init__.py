"""Kernel backend selection.

The compiled Cython extension is preferred when importable; the numpy
fallback implements the same algorithms.  Set PERRONLAB_KERNELS to
``compiled`` or ``python`` to force a backend (``auto`` is the default);
forcing ``compiled`` raises if the extension is missing.
"""

from __future__ import annotations

import os

from . import _numpy

_MASK64 = 0xFFFFFFFFFFFFFFFF

_requested = os.environ.get("PERRONLAB_KERNELS", "auto").lower()
if _requested not in ("auto", "compiled", "python"):
    raise ValueError(f"PERRONLAB_KERNELS must be auto|compiled|python, got {_requested!r}")

_impl = None
if _requested in ("auto", "compiled"):
    try:
        from . import _compiled as _impl  # type: ignore[no-redef]
    except ImportError:
        if _requested == "compiled":
            raise
        _impl = None
if _impl is None:
    _impl = _numpy

BACKEND: str = _impl.BACKEND_NAME

if BACKEND == "compiled":
    from ._packing import CompiledStepper as Stepper
else:
    Stepper = _numpy.Stepper  # type: ignore[assignment,misc]
philox_bits = _impl.philox_bits
bits_to_uniforms = _impl.bits_to_uniforms
normals = _impl.normals


def splitmix64(x: int) -> int:
    """One splitmix64 step; exact 64-bit integer arithmetic."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *indices: int) -> int:
    """Deterministically derive a child seed from a master seed and indices."""
    h = splitmix64(seed & _MASK64)
    for idx in indices:
        h = splitmix64(h ^ ((idx + 1) & _MASK64))
    return h


__all__ = [
    "BACKEND",
    "Stepper",
    "philox_bits",
    "bits_to_uniforms",
    "normals",
    "splitmix64",
    "derive_seed",
]
