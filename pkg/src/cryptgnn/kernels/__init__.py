"""Kernel backend selection.

The compiled extension is used when importable; otherwise the numpy
fallback takes over. CRYPTGNN_KERNEL=numpy|compiled forces a backend
(compiled raises if the extension is missing). Both backends produce
identical outputs; `cryptgnn bench --kernels` compares their speed.
"""

import os

import numpy as np

from . import numpy_impl

_requested = os.environ.get("CRYPTGNN_KERNEL", "auto").lower()

if _requested == "numpy":
    _impl = numpy_impl
    BACKEND = "numpy"
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise ImportError(
                "compiled kernels requested via CRYPTGNN_KERNEL but the "
                "extension is not built; run `python setup.py build_ext --inplace`"
            )
        _impl = numpy_impl
        BACKEND = "numpy"


def mul_mod(a, b) -> np.ndarray:
    """Elementwise product mod q with numpy broadcasting."""
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    shape = np.broadcast_shapes(a.shape, b.shape)
    af = np.ascontiguousarray(np.broadcast_to(a, shape)).ravel()
    bf = np.ascontiguousarray(np.broadcast_to(b, shape)).ravel()
    return _impl.mul_mod_flat(af, bf).reshape(shape)


def matmul_mod(a, b) -> np.ndarray:
    """Matrix product mod q for 2-D uint64 arrays."""
    a = np.ascontiguousarray(a, dtype=np.uint64)
    b = np.ascontiguousarray(b, dtype=np.uint64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"incompatible shapes {a.shape} x {b.shape}")
    return _impl.matmul_mod(a, b)


def inv_mod_array(a) -> np.ndarray:
    """Elementwise multiplicative inverse mod q; rejects zeros."""
    a = np.asarray(a, dtype=np.uint64)
    return _impl.inv_mod_flat(np.ascontiguousarray(a).ravel()).reshape(a.shape)


def add_rotate_stack(stack, noise, shifts) -> np.ndarray:
    """Mask every batch matrix with noise, then rotate its rows down by shifts[r]."""
    stack = np.ascontiguousarray(stack, dtype=np.uint64)
    noise = np.ascontiguousarray(noise, dtype=np.uint64)
    shifts = np.ascontiguousarray(shifts, dtype=np.uint64)
    if stack.shape != noise.shape or stack.ndim != 3 or shifts.shape != (stack.shape[0],):
        raise ValueError("stack/noise/shifts shapes disagree")
    return _impl.add_rotate_stack(stack, noise, shifts)
