"""Pure-numpy fallback kernels, contract-identical to the compiled core.

Elementwise multiplication splits operands into 31/30-bit limbs so every
partial product fits in uint64, then recombines with Mersenne folds
(2^61 = 1 mod q). Inversion uses a Fermat ladder so it stays vectorized.
"""

import numpy as np

from ..field import MODULUS, add_mod

_Q = np.uint64(MODULUS)
_MASK31 = np.uint64((1 << 31) - 1)
_MASK30 = np.uint64((1 << 30) - 1)
_S31 = np.uint64(31)
_S30 = np.uint64(30)
_S61 = np.uint64(61)
_TWO = np.uint64(2)


def mul_mod_flat(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a0 = a & _MASK31
    a1 = a >> _S31
    b0 = b & _MASK31
    b1 = b >> _S31
    hh = a1 * b1                      # < 2^60
    cross = a1 * b0 + a0 * b1         # < 2^62 < 2q + 2
    ll = a0 * b0                      # < 2^62
    cross = np.where(cross >= _Q, cross - _Q, cross)
    cross = np.where(cross >= _Q, cross - _Q, cross)
    # cross * 2^31 mod q, keeping intermediates under 2^62
    cross = ((cross & _MASK30) << _S31) + (cross >> _S30)
    ll = (ll >> _S61) + (ll & _Q)
    r = hh * _TWO + cross + ll        # < 2^63
    r = (r >> _S61) + (r & _Q)
    return np.where(r >= _Q, r - _Q, r)


def matmul_mod(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, k = a.shape
    k2, m = b.shape
    out = np.zeros((n, m), dtype=np.uint64)
    for t in range(k):
        term = mul_mod_flat(
            np.broadcast_to(a[:, t : t + 1], (n, m)).ravel(),
            np.broadcast_to(b[t : t + 1, :], (n, m)).ravel(),
        ).reshape(n, m)
        out = add_mod(out, term)
    return out


def inv_mod_flat(a: np.ndarray) -> np.ndarray:
    if np.any(a == 0):
        raise ZeroDivisionError("zero has no multiplicative inverse")
    # a^(q-2) by square-and-multiply over the fixed 61-bit exponent
    exponent = MODULUS - 2
    result = np.ones_like(a)
    base = a
    for bit in range(60, -1, -1):
        result = mul_mod_flat(result, result)
        if (exponent >> bit) & 1:
            result = mul_mod_flat(result, base)
    return result


def add_rotate_stack(stack: np.ndarray, noise: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    n_batches, n_rows, _ = stack.shape
    masked = add_mod(stack, noise)
    src = (np.arange(n_rows, dtype=np.int64)[None, :] - (shifts % n_rows).astype(np.int64)[:, None]) % n_rows
    return masked[np.arange(n_batches)[:, None], src, :]
