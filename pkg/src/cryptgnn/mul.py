"""Secure multiplication for feature-transformation layers.

Matrix products reuse one offline Beaver triple per linear layer: each
request derives a fresh triple by taking the same public random linear
combination of the rows of A and C at every party, so only the masked
activation difference is opened per request (the parameter-side opening
is computed once per client and cached).

Elementwise products burn fresh randomness per element and request:
parties locally sample a multiplicative triple (no communication),
convert it to additive form with three additive-multiplicative pairs
per element (all ratio openings batched into one round), then run the
standard two-opening multiplication. Truncation and sign comparison
consume dealer pools and open only masked values.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from .field import (
    MODULUS,
    STAT_SECURITY,
    TRUNC_MAGNITUDE_BITS,
    add_mod,
    signed_array,
    sub_mod,
)
from .kernels import inv_mod_array, matmul_mod, mul_mod
from .prf import SeededPrf
from .provider import AMPool, ComparePool, MatrixTripleShare, TruncationPool, beaver_mul_open
from .transport import ProtocolAbort, Session
from .wire import Tag


class TripleReuseError(RuntimeError):
    pass


@dataclass
class DerivedTriple:
    """Per-request triple (A', B, C') with A' x B = C' by construction."""

    a_prime: np.ndarray
    b: np.ndarray
    c_prime: np.ndarray
    derived_id: bytes

    @property
    def n_rows(self) -> int:
        return self.a_prime.shape[0]


@dataclass
class MulTriple:
    """Multiplicative-format triple; product of c shares equals product
    of a shares times product of b shares, with no communication."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray


def rand_comb(triple: MatrixTripleShare, n_req: int, nonce: bytes) -> DerivedTriple:
    """Row-recombine the offline triple for one request; local only.

    Every party seeds the coefficient PRF with the same public nonce, so
    the shares of A' and C' stay aligned and A' x B = C' exactly.
    """
    if n_req > triple.n_max:
        raise ValueError(f"request rows {n_req} exceed triple capacity {triple.n_max}")
    comb_seed = hashlib.blake2b(nonce, key=triple.triple_id, digest_size=32).digest()
    coeffs = SeededPrf(comb_seed, ("rand-comb",)).field_matrix((n_req, triple.n_max))
    derived_id = hashlib.blake2b(nonce + triple.triple_id, digest_size=16).digest()
    return DerivedTriple(
        a_prime=matmul_mod(coeffs, triple.a),
        b=triple.b,
        c_prime=matmul_mod(coeffs, triple.c),
        derived_id=derived_id,
    )


def open_parameter_mask(session: Session, y_share: np.ndarray, triple: MatrixTripleShare) -> np.ndarray:
    """Open V = Y - B once per (client, layer, model version); cacheable."""
    return session.broadcast_open(sub_mod(y_share, triple.b), Tag.BEAVER_OPEN)


def mat_mul(
    session: Session,
    x_share: np.ndarray,
    derived: DerivedTriple,
    opened_v: np.ndarray,
    used_ids: set,
) -> np.ndarray:
    """Shares of X x Y at double scale; exactly one opening round when V
    is cached. Refuses to consume the same derived triple twice."""
    if derived.derived_id in used_ids:
        raise TripleReuseError("derived triple already consumed")
    used_ids.add(derived.derived_id)
    if x_share.shape[0] != derived.n_rows:
        raise ValueError("derived triple sized for a different request")
    u = session.broadcast_open(sub_mod(x_share, derived.a_prime), Tag.BEAVER_OPEN)
    z = add_mod(matmul_mod(u, derived.b), matmul_mod(derived.a_prime, opened_v))
    z = add_mod(z, derived.c_prime)
    if session.ring.my_index == 0:
        z = add_mod(z, matmul_mod(u, opened_v))
    return z


def beaver_m(prf: SeededPrf, count: int, *labels) -> MulTriple:
    """Sample a fresh multiplicative triple locally; zero communication."""
    a = prf.nonzero_field_matrix(count, "beaver-m", "a", *labels)
    b = prf.nonzero_field_matrix(count, "beaver-m", "b", *labels)
    return MulTriple(a, b, mul_mod(a, b))


def m_to_a(session: Session, w_mul: np.ndarray, pool: AMPool, context: str = "m-to-a") -> np.ndarray:
    """Convert multiplicative shares to additive shares with one pair each.

    Parties locally divide by their pair share (inverse via the extended
    Euclidean kernel), open the ratio in one round, and scale their
    additive pair share by it.
    """
    w_mul = np.asarray(w_mul, dtype=np.uint64)
    if np.any(w_mul == 0):
        raise ValueError("multiplicative shares must be nonzero")
    pair = pool.take(w_mul.size, context)
    alpha_share = mul_mod(w_mul.ravel(), inv_mod_array(pair["r_mul"]))
    alpha = session.broadcast_open_product(alpha_share.reshape(1, -1), Tag.ALPHA_OPEN).ravel()
    return mul_mod(alpha, pair["r_add"]).reshape(w_mul.shape)


def beaver_m_to_a(session: Session, triple: MulTriple, pool: AMPool, context: str = "triple"):
    """Convert a whole multiplicative triple; the three ratio openings
    ride in a single communication round."""
    n = triple.a.size
    pair = pool.take(3 * n, context)
    w = np.concatenate([triple.a, triple.b, triple.c])
    alpha_share = mul_mod(w, inv_mod_array(pair["r_mul"]))
    alpha = session.broadcast_open_product(alpha_share.reshape(1, -1), Tag.ALPHA_OPEN).ravel()
    add = mul_mod(alpha, pair["r_add"])
    return add[:n], add[n : 2 * n], add[2 * n :]


def elem_mul(
    session: Session,
    x_share: np.ndarray,
    y_share: np.ndarray,
    offline,
    prf: SeededPrf,
    context: str = "elem-mul",
) -> np.ndarray:
    """Entrywise product of two share matrices at double scale.

    Fresh triples per element and per request: local multiplicative
    sampling, one conversion round, one opening round.
    """
    x_share = np.asarray(x_share, dtype=np.uint64)
    y_share = np.asarray(y_share, dtype=np.uint64)
    shape = np.broadcast_shapes(x_share.shape, y_share.shape)
    x_flat = np.ascontiguousarray(np.broadcast_to(x_share, shape)).ravel()
    y_flat = np.ascontiguousarray(np.broadcast_to(y_share, shape)).ravel()
    triple = beaver_m(prf, x_flat.size, context, offline.am.cursor)
    a, b, c = beaver_m_to_a(session, triple, offline.am, context)
    z = beaver_mul_open(session, x_flat, y_flat, a, b, c)
    return z.reshape(shape)


def truncate(session: Session, z_share: np.ndarray, pool: TruncationPool, fraction_bits: int) -> np.ndarray:
    """Drop fraction_bits of scale: open the masked value, truncate in
    clear, subtract the truncated mask. Error at most one output unit."""
    z_share = np.asarray(z_share, dtype=np.uint64)
    pair = pool.take(z_share.size, "truncate")
    bias = np.uint64((1 << TRUNC_MAGNITUDE_BITS) % MODULUS)
    masked = add_mod(z_share.ravel(), pair["r_full"])
    if session.ring.my_index == 0:
        masked = add_mod(masked, bias)
    opened = session.broadcast_open(masked.reshape(1, -1), Tag.BEAVER_OPEN).ravel()
    if int(opened.max(initial=0)) >= 1 << (TRUNC_MAGNITUDE_BITS + STAT_SECURITY + 1):
        raise ProtocolAbort(
            "truncation input out of range; value magnitude exceeded "
            f"2^{TRUNC_MAGNITUDE_BITS - 2 * fraction_bits} in real terms"
        )
    clear_high = opened >> np.uint64(fraction_bits)
    out = sub_mod(np.zeros_like(z_share.ravel()), pair["r_high"])
    if session.ring.my_index == 0:
        offset = np.uint64((1 << (TRUNC_MAGNITUDE_BITS - fraction_bits)) % MODULUS)
        out = add_mod(out, sub_mod(clear_high, offset))
    return out.reshape(z_share.shape)


def compare_positive(session: Session, x_share: np.ndarray, pool: ComparePool) -> np.ndarray:
    """Shares of the indicator bit(signed(x) > 0), exact for every input.

    The value is multiplied by a dealt positive scale with a hidden sign
    flip and opened; the public masked sign is folded back through the
    secret flip bit locally. Opened zeros are published as-is (this
    emulation, unlike a production comparison, reveals exact zeros).
    """
    x_share = np.asarray(x_share, dtype=np.uint64)
    bundle = pool.take(x_share.size, "compare")
    y = beaver_mul_open(
        session,
        x_share.ravel(),
        bundle["scale_sign"],
        bundle["trip_a"],
        bundle["trip_b"],
        bundle["trip_c"],
    )
    opened = session.broadcast_open(y.reshape(1, -1), Tag.BEAVER_OPEN).ravel()
    masked_sign = signed_array(opened)
    flipped = bundle["sign_bit"]
    positive = masked_sign > 0
    # bit = pi * flip + (1 - pi) * (1 - flip); "1" is held by party 0
    one = np.uint64(1) if session.ring.my_index == 0 else np.uint64(0)
    bit = np.where(positive, flipped, sub_mod(np.full_like(flipped, one), flipped))
    bit = np.where(masked_sign == 0, np.zeros_like(bit), bit)
    return bit.reshape(x_share.shape)
