"""Additive and multiplicative secret sharing over the field.

A secret matrix is held as P uint64 share matrices whose entrywise
mod-q sum reconstructs it. Node indices are shared mod N (N public)
so index sums reduce correctly regardless of field wraparound.
Multiplicative shares are nonzero field elements whose product
reconstructs the secret.
"""

from dataclasses import dataclass

import numpy as np

from .field import MODULUS, add_mod, sub_mod, sum_mod
from .kernels import mul_mod
from .prf import SeededPrf


class ShapeMismatchError(ValueError):
    pass


@dataclass
class ShareMatrix:
    """One party's additive share of a secret matrix."""

    data: np.ndarray
    owner: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint64)

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def validate(self):
        if np.any(self.data >= np.uint64(MODULUS)):
            raise ValueError("share contains unreduced elements")


def _as_arrays(shares):
    out = []
    for s in shares:
        out.append(s.data if isinstance(s, ShareMatrix) else np.asarray(s, dtype=np.uint64))
    return out


def split_additive(secret, parties: int, prf: SeededPrf, *labels) -> list:
    """P uniform shares summing to the secret; first P-1 from the PRF."""
    if parties < 2:
        raise ValueError("need at least 2 parties")
    secret = np.asarray(secret, dtype=np.uint64)
    shares = [prf.field_matrix(secret.shape, *labels, p) for p in range(parties - 1)]
    last = secret
    for s in shares:
        last = sub_mod(last, s)
    shares.append(last)
    return shares

def reconstruct_additive(shares) -> np.ndarray:
    arrs = _as_arrays(shares)
    shape = arrs[0].shape
    for a in arrs[1:]:
        if a.shape != shape:
            raise ShapeMismatchError(f"share shapes differ: {a.shape} vs {shape}")
    return sum_mod(np.stack(arrs), axis=0)


def split_mod(values, modulus: int, parties: int, prf: SeededPrf, *labels) -> list:
    """Additive sharing mod an arbitrary public modulus (used for node indices)."""
    if parties < 2:
        raise ValueError("need at least 2 parties")
    values = np.asarray(values, dtype=np.uint64)
    n = values.size
    shares = [prf.integers(n, modulus, *labels, p).reshape(values.shape) for p in range(parties - 1)]
    acc = np.zeros_like(values)
    for s in shares:
        acc = (acc + s) % np.uint64(modulus)
    last = (values + np.uint64(modulus) - acc) % np.uint64(modulus)
    shares.append(last)
    return shares


def reconstruct_mod(shares, modulus: int) -> np.ndarray:
    arrs = _as_arrays(shares)
    acc = np.zeros_like(arrs[0])
    for a in arrs:
        acc = (acc + a) % np.uint64(modulus)
    return acc


def split_multiplicative(secret, parties: int, prf: SeededPrf, *labels) -> list:
    """P nonzero shares whose mod-q product reconstructs the (nonzero) secret."""
    secret = np.asarray(secret, dtype=np.uint64)
    if np.any(secret == 0):
        raise ValueError("multiplicative sharing needs nonzero secrets")
    from .kernels import inv_mod_array

    shares = [prf.nonzero_field_matrix(secret.shape, *labels, p) for p in range(parties - 1)]
    prod = np.ones_like(secret)
    for s in shares:
        prod = mul_mod(prod, s)
    shares.append(mul_mod(secret, inv_mod_array(prod)))
    return shares


def reconstruct_multiplicative(shares) -> np.ndarray:
    arrs = _as_arrays(shares)
    out = np.ones_like(arrs[0])
    for a in arrs:
        out = mul_mod(out, a)
    return out


def add_shares(a, b):
    return add_mod(np.asarray(a, dtype=np.uint64), np.asarray(b, dtype=np.uint64))


def sub_shares(a, b):
    return sub_mod(np.asarray(a, dtype=np.uint64), np.asarray(b, dtype=np.uint64))
