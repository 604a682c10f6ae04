"""Prime-field arithmetic with fixed-point encoding.

All share arithmetic runs over the Mersenne prime field q = 2^61 - 1,
carried in numpy uint64 arrays with every element strictly below q.
Additions and subtractions are vectorized here; multiplications, which
need 122-bit intermediates, live in :mod:`cryptgnn.kernels`.

Signed convention: values in ((q-1)/2, q) decode as negatives.
"""

from dataclasses import dataclass

import numpy as np

MODULUS = (1 << 61) - 1
HALF_MODULUS = MODULUS >> 1

_Q = np.uint64(MODULUS)
_SHIFT61 = np.uint64(61)

# Bounds for the masked-open truncation protocol: values entering a
# truncation must satisfy |signed(x)| < 2^TRUNC_MAGNITUDE_BITS, and the
# statistical masking gap is STAT_SECURITY bits. The sum of the two must
# stay below 60 so masked openings never wrap the field.
TRUNC_MAGNITUDE_BITS = 44
STAT_SECURITY = 15


class FieldOverflowError(ValueError):
    """Raised when a real value exceeds the representable fixed-point range."""


def as_field_array(values) -> np.ndarray:
    """Coerce to a uint64 array of reduced field elements."""
    arr = np.asarray(values)
    if arr.dtype == np.uint64:
        return arr
    return np.mod(arr, MODULUS).astype(np.uint64)


def add_mod(a, b) -> np.ndarray:
    s = np.add(a, b, dtype=np.uint64)
    return np.where(s >= _Q, s - _Q, s)


def sub_mod(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    return np.where(a >= b, a - b, a + _Q - b)


def neg_mod(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.uint64)
    return np.where(a == 0, a, _Q - a)


def sum_mod(a: np.ndarray, axis: int = 0) -> np.ndarray:
    """Exact mod-q sum along an axis via pairwise folding.

    Plain np.sum overflows uint64 after eight addends; folding halves the
    axis each pass so every intermediate stays below 2^62.
    """
    a = np.asarray(a, dtype=np.uint64)
    while a.shape[axis] > 1:
        n = a.shape[axis]
        half = n // 2
        lo = np.take(a, range(half), axis=axis)
        hi = np.take(a, range(half, 2 * half), axis=axis)
        folded = add_mod(lo, hi)
        if n % 2:
            last = np.take(a, [n - 1], axis=axis)
            folded = np.concatenate([folded, last], axis=axis)
        a = folded
    return np.squeeze(a, axis=axis)


def signed_value(v: int) -> int:
    """Centered representative of a field element in (-q/2, q/2]."""
    v = int(v)
    return v - MODULUS if v > HALF_MODULUS else v


def signed_array(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.uint64)
    out = v.astype(np.int64)
    return np.where(v > np.uint64(HALF_MODULUS), out - np.int64(MODULUS), out)


def inv_mod(x: int, modulus: int = MODULUS) -> int:
    """Multiplicative inverse by the extended Euclidean algorithm."""
    x = int(x) % modulus
    if x == 0:
        raise ZeroDivisionError("zero has no multiplicative inverse")
    r0, r1 = modulus, x
    t0, t1 = 0, 1
    while r1:
        k = r0 // r1
        r0, r1 = r1, r0 - k * r1
        t0, t1 = t1, t0 - k * t1
    return t0 % modulus


def mul_scalar_mod(a: int, b: int, modulus: int = MODULUS) -> int:
    return (int(a) * int(b)) % modulus


@dataclass(frozen=True)
class FixedPointCodec:
    """Maps reals to field elements as round(2^f * x), negatives as q - |v|."""

    fraction_bits: int = 16

    @property
    def scale(self) -> int:
        return 1 << self.fraction_bits

    def encode(self, values) -> np.ndarray:
        arr = np.asarray(values, dtype=np.float64)
        limit = float(1 << (60 - self.fraction_bits))
        if np.any(~np.isfinite(arr)) or np.any(np.abs(arr) >= limit):
            raise FieldOverflowError(
                f"magnitude must be below 2^{60 - self.fraction_bits}"
            )
        fixed = np.rint(arr * self.scale).astype(np.int64)
        out = fixed.astype(np.uint64)
        return np.where(fixed < 0, np.uint64(MODULUS) + out, out)

    def encode_scalar(self, value: float) -> int:
        return int(self.encode(np.asarray([value]))[0])

    def decode(self, values) -> np.ndarray:
        return signed_array(np.asarray(values, dtype=np.uint64)) / self.scale

    def decode_scalar(self, value: int) -> float:
        return signed_value(value) / self.scale
