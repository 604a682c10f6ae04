"""Correlated randomness for secure multiplication and non-linear layers.

A dealer emulation stands in for the heavyweight offline substrates
(homomorphic encryption / oblivious transfer) behind the same contracts:
it samples matrix and scalar Beaver triples, truncation pairs, and
comparison bundles, and performs the two-party additive-to-multiplicative
conversion step inside additive-multiplicative pair generation. The
dealer exists only in the offline phase; online protocols consume the
dealt material through per-party pools with strict single-use cursors.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .field import MODULUS, STAT_SECURITY, TRUNC_MAGNITUDE_BITS, add_mod, sub_mod
from .kernels import inv_mod_array, matmul_mod, mul_mod
from .prf import SeededPrf
from .sharing import split_additive
from .transport import Session
from .wire import Tag, pack_matrix, unpack_matrix

COMPARE_SCALE_BITS = 20


class PoolExhaustedError(RuntimeError):
    """The offline phase was undersized for the requested online work."""


class PairReuseError(RuntimeError):
    pass


@dataclass
class MatrixTripleShare:
    """One party's share of a matrix Beaver triple with A (Nmax,K) x B (K,K') = C."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    triple_id: bytes

    @property
    def n_max(self) -> int:
        return self.a.shape[0]


class _CursorPool:
    """Single-use slab of correlated randomness with an audit trail."""

    kind = "pool"

    def __init__(self, arrays: dict, cursor: int = 0):
        self.arrays = {k: np.asarray(v, dtype=np.uint64).ravel() for k, v in arrays.items()}
        sizes = {v.size for v in self.arrays.values()}
        if len(sizes) != 1:
            raise ValueError("pool arrays must share a length")
        self.size = sizes.pop()
        self.cursor = cursor
        self.audit_log = []

    @property
    def remaining(self) -> int:
        return self.size - self.cursor

    def take(self, count: int, context: str) -> dict:
        if count < 0:
            raise ValueError("negative take")
        if self.cursor + count > self.size:
            raise PoolExhaustedError(
                f"{self.kind} exhausted: need {count}, have {self.remaining}"
            )
        start = self.cursor
        self.cursor += count
        self.audit_log.append((context, start, count))
        return {k: v[start : start + count] for k, v in self.arrays.items()}


class AMPool(_CursorPool):
    """Pairs of the same random value shared additively and multiplicatively.

    Converting one multiplicative value to additive form consumes one
    pair; a Beaver triple conversion consumes three. The cursor never
    rewinds, so no pair index is used twice within or across inferences.
    """

    kind = "additive-multiplicative pair pool"

    def __init__(self, r_add, r_mul, cursor: int = 0):
        super().__init__({"r_add": r_add, "r_mul": r_mul}, cursor)


class TruncationPool(_CursorPool):
    """Masked-open truncation pairs (r, floor(r / 2^f))."""

    kind = "truncation pool"

    def __init__(self, r_full, r_high, cursor: int = 0):
        super().__init__({"r_full": r_full, "r_high": r_high}, cursor)


class ComparePool(_CursorPool):
    """Sign-comparison bundles: a positive scale with a hidden sign flip,
    the flip indicator bit, and a scalar triple to apply the scale."""

    kind = "compare pool"

    def __init__(self, scale_sign, sign_bit, trip_a, trip_b, trip_c, cursor: int = 0):
        super().__init__(
            {
                "scale_sign": scale_sign,
                "sign_bit": sign_bit,
                "trip_a": trip_a,
                "trip_b": trip_b,
                "trip_c": trip_c,
            },
            cursor,
        )


@dataclass
class MsasMaterial:
    """One party's dealt inputs for additive-multiplicative pair generation.

    level_add[i] is this party's additive share of the level-i pairwise sum
    R_i (zero unless the party is one of the two contributors), level_mul[i]
    the dealer-converted multiplicative share (one for non-contributors).
    fold_triples holds scalar Beaver triple shares for the additive fold.
    """

    level_add: np.ndarray  # (P-1, k)
    level_mul: np.ndarray  # (P-1, k)
    fold_a: np.ndarray  # (P-2, k)
    fold_b: np.ndarray
    fold_c: np.ndarray


@dataclass
class PartyOffline:
    """Everything one party loads from disk before an online session."""

    client_id: str
    party: int
    parties: int
    fraction_bits: int
    n_max: int
    am: AMPool
    trunc: TruncationPool
    cmp: ComparePool
    matrix_triples: dict = field(default_factory=dict)  # layer name -> MatrixTripleShare


class Dealer:
    """Offline-only trusted sampler; never appears in online sessions."""

    def __init__(self, seed: bytes, parties: int):
        if parties < 2:
            raise ValueError("need at least 2 parties")
        self.prf = SeededPrf(seed, ("dealer",))
        self.parties = parties

    def matrix_triples(self, client_id: str, layer_name: str, n_max: int, k: int, k2: int):
        """Deal shares of (A, B, C = A x B); fresh and independent per client."""
        prf = self.prf.child("matrix-triple", client_id, layer_name)
        a = prf.field_matrix((n_max, k), "a")
        b = prf.field_matrix((k, k2), "b")
        c = matmul_mod(a, b)
        triple_id = prf.derive_seed("id")[:16]
        a_shares = split_additive(a, self.parties, prf, "a-shares")
        b_shares = split_additive(b, self.parties, prf, "b-shares")
        c_shares = split_additive(c, self.parties, prf, "c-shares")
        return [
            MatrixTripleShare(a_shares[p], b_shares[p], c_shares[p], triple_id)
            for p in range(self.parties)
        ]

    def scalar_triple_shares(self, label, shape):
        prf = self.prf.child("scalar-triple", *label)
        a = prf.field_matrix(shape, "a")
        b = prf.field_matrix(shape, "b")
        c = mul_mod(a, b)
        return (
            split_additive(a, self.parties, prf, "as"),
            split_additive(b, self.parties, prf, "bs"),
            split_additive(c, self.parties, prf, "cs"),
        )

    def truncation_pools(self, client_id: str, count: int, fraction_bits: int):
        """Pairs (r, floor(r/2^f)) with r < 2^(magnitude+gap) for masked opening."""
        prf = self.prf.child("trunc", client_id)
        high_bits = TRUNC_MAGNITUDE_BITS + STAT_SECURITY - fraction_bits
        r_high = prf.integers(count, 1 << high_bits, "hi")
        r_low = prf.integers(count, 1 << fraction_bits, "lo")
        r_full = (r_high << np.uint64(fraction_bits)) + r_low
        full_shares = split_additive(r_full, self.parties, prf, "full")
        high_shares = split_additive(r_high, self.parties, prf, "high")
        return [TruncationPool(full_shares[p], high_shares[p]) for p in range(self.parties)]

    def compare_pools(self, client_id: str, count: int):
        prf = self.prf.child("compare", client_id)
        scale = prf.integers(count, (1 << COMPARE_SCALE_BITS) - 1, "scale") + np.uint64(1)
        sign = prf.integers(count, 2, "sign")  # 1 = keep sign, 0 = flipped
        scale_sign = np.where(sign == 1, scale, np.uint64(MODULUS) - scale)
        ss_shares = split_additive(scale_sign, self.parties, prf, "ss")
        bit_shares = split_additive(sign, self.parties, prf, "bit")
        ta, tb, tc = self.scalar_triple_shares(("cmp", client_id), count)
        return [
            ComparePool(ss_shares[p], bit_shares[p], ta[p], tb[p], tc[p])
            for p in range(self.parties)
        ]

    def msas_materials(self, client_id: str, count: int, party_inputs: list) -> list:
        """Dealer side of pair generation.

        party_inputs[i] is the X array drawn privately by party i. For each
        ring level i, parties i and i+1 contribute X_i + X_{i+1} = R_i; the
        dealer emulates the two-party conversion by handing party i a random
        nonzero factor and party i+1 the complement R_i * factor^-1. Zero
        sums are resampled from the dealer stream and never emitted.
        """
        parties = self.parties
        prf = self.prf.child("msas", client_id)
        level_add = np.zeros((parties, parties - 1, count), dtype=np.uint64)
        level_mul = np.ones((parties, parties - 1, count), dtype=np.uint64)
        for i in range(parties - 1):
            x_lo = np.asarray(party_inputs[i], dtype=np.uint64).copy()
            x_hi = np.asarray(party_inputs[i + 1], dtype=np.uint64).copy()
            r_i = add_mod(x_lo, x_hi)
            zero = r_i == 0
            while np.any(zero):
                bump = prf.field_matrix(int(zero.sum()), "resample", i)
                x_hi[zero] = bump
                r_i = add_mod(x_lo, x_hi)
                zero = r_i == 0
            factor = prf.nonzero_field_matrix(count, "conv", i)
            level_add[i, i] = x_lo
            level_add[i + 1, i] = x_hi
            level_mul[i, i] = factor
            level_mul[i + 1, i] = mul_mod(r_i, inv_mod_array(factor))
        fold_levels = max(parties - 2, 0)
        fold_a = np.zeros((parties, fold_levels, count), dtype=np.uint64)
        fold_b = np.zeros_like(fold_a)
        fold_c = np.zeros_like(fold_a)
        for lvl in range(fold_levels):
            ta, tb, tc = self.scalar_triple_shares(("msas-fold", client_id, lvl), count)
            for p in range(parties):
                fold_a[p, lvl] = ta[p]
                fold_b[p, lvl] = tb[p]
                fold_c[p, lvl] = tc[p]
        return [
            MsasMaterial(level_add[p], level_mul[p], fold_a[p], fold_b[p], fold_c[p])
            for p in range(self.parties)
        ]


def beaver_mul_open(session: Session, x, y, a, b, c, tag: Tag = Tag.BEAVER_OPEN):
    """One Beaver multiplication over arrays: opens (x-a, y-b) in a single
    round, then combines locally. Party 0 adds the public d*e term."""
    x = np.asarray(x, dtype=np.uint64)
    d_share = sub_mod(x, a)
    e_share = sub_mod(y, b)
    stacked = np.stack([d_share.ravel(), e_share.ravel()])
    opened = session.broadcast_open(stacked, tag)
    d = opened[0].reshape(x.shape)
    e = opened[1].reshape(x.shape)
    z = add_mod(add_mod(mul_mod(d, b), mul_mod(e, a)), c)
    if session.ring.my_index == 0:
        z = add_mod(z, mul_mod(d, e))
    return z


def msas_pair_batch(session: Session, material: MsasMaterial, count: int) -> AMPool:
    """Generate `count` additive-multiplicative pairs from dealt material.

    The additive sharing of R = prod R_i is computed with one Beaver fold
    per extra level (left fold, all pairs batched into one opening per
    level); the multiplicative sharing is a local product.
    """
    if material.level_add.shape[1] != count:
        raise ValueError("material sized for a different batch")
    parties = session.ring.parties
    r_add = material.level_add[0]
    for lvl in range(1, parties - 1):
        r_add = beaver_mul_open(
            session,
            r_add,
            material.level_add[lvl],
            material.fold_a[lvl - 1],
            material.fold_b[lvl - 1],
            material.fold_c[lvl - 1],
        )
    r_mul = np.ones(count, dtype=np.uint64)
    for lvl in range(parties - 1):
        r_mul = mul_mod(r_mul, material.level_mul[lvl])
    return AMPool(r_add, r_mul)


def generate_offline(
    master_seed: bytes,
    client_id: str,
    parties: int,
    am_pairs: int,
    trunc_pairs: int,
    cmp_bundles: int,
    fraction_bits: int,
    n_max: int,
    layer_shapes: dict,
) -> list:
    """Run the whole offline phase for one client and return per-party pools.

    Pair generation is interactive (the additive fold opens masked values),
    so the P parties run it here over an in-process hub; everything else is
    dealt directly.
    """
    import threading

    from .transport import LoopbackHub

    dealer = Dealer(master_seed, parties)
    root = SeededPrf(master_seed, ("offline", client_id))
    party_inputs = [
        SeededPrf(root.derive_seed("party-x", p)).field_matrix(am_pairs, "x")
        for p in range(parties)
    ]
    materials = dealer.msas_materials(client_id, am_pairs, party_inputs)

    hub = LoopbackHub(parties)
    sessions = hub.sessions(root.derive_seed("session")[:16])
    pools = [None] * parties
    errors = []

    def _worker(p):
        try:
            pools[p] = msas_pair_batch(sessions[p], materials[p], am_pairs)
        except Exception as exc:
            errors.append(exc)
            hub.abort(repr(exc))

    threads = [threading.Thread(target=_worker, args=(p,)) for p in range(parties)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]

    trunc = dealer.truncation_pools(client_id, trunc_pairs, fraction_bits)
    cmp_pools = dealer.compare_pools(client_id, cmp_bundles)
    triples = {
        name: dealer.matrix_triples(client_id, name, n_max, k, k2)
        for name, (k, k2) in sorted(layer_shapes.items())
    }
    out = []
    for p in range(parties):
        out.append(
            PartyOffline(
                client_id=client_id,
                party=p,
                parties=parties,
                fraction_bits=fraction_bits,
                n_max=n_max,
                am=pools[p],
                trunc=trunc[p],
                cmp=cmp_pools[p],
                matrix_triples={name: shares[p] for name, shares in triples.items()},
            )
        )
    return out


_POOL_MAGIC = b"CGPL"
_POOL_VERSION = 1


def save_party_offline(path, offline: PartyOffline):
    client_raw = offline.client_id.encode("utf-8")
    parts = [
        _POOL_MAGIC,
        struct.pack(
            "<IHHII",
            _POOL_VERSION,
            offline.party,
            offline.parties,
            offline.fraction_bits,
            offline.n_max,
        ),
        struct.pack("<H", len(client_raw)),
        client_raw,
    ]

    def _pool(pool, names):
        parts.append(struct.pack("<QQ", pool.size, pool.cursor))
        for name in names:
            parts.append(pack_matrix(pool.arrays[name]))

    _pool(offline.am, ["r_add", "r_mul"])
    _pool(offline.trunc, ["r_full", "r_high"])
    _pool(offline.cmp, ["scale_sign", "sign_bit", "trip_a", "trip_b", "trip_c"])
    parts.append(struct.pack("<I", len(offline.matrix_triples)))
    for name in sorted(offline.matrix_triples):
        triple = offline.matrix_triples[name]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(triple.triple_id)
        for mat in (triple.a, triple.b, triple.c):
            parts.append(pack_matrix(mat))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_party_offline(path) -> PartyOffline:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _POOL_MAGIC:
        raise ValueError("not a pool file")
    version, party, parties, fraction_bits, n_max = struct.unpack_from("<IHHII", buf, 4)
    if version != _POOL_VERSION:
        raise ValueError(f"unsupported pool version {version}")
    offset = 4 + struct.calcsize("<IHHII")
    (client_len,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    client_id = buf[offset : offset + client_len].decode("utf-8")
    offset += client_len

    def _pool(names):
        nonlocal offset
        size, cursor = struct.unpack_from("<QQ", buf, offset)
        offset += 16
        arrays = {}
        for name in names:
            mat, offset = unpack_matrix(buf, offset)
            arrays[name] = mat.ravel()
            if arrays[name].size != size:
                raise ValueError("pool section size mismatch")
        return arrays, cursor

    am_arrays, am_cursor = _pool(["r_add", "r_mul"])
    trunc_arrays, trunc_cursor = _pool(["r_full", "r_high"])
    cmp_arrays, cmp_cursor = _pool(["scale_sign", "sign_bit", "trip_a", "trip_b", "trip_c"])
    (n_triples,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    triples = {}
    for _ in range(n_triples):
        (name_len,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        name = buf[offset : offset + name_len].decode("utf-8")
        offset += name_len
        triple_id = bytes(buf[offset : offset + 16])
        offset += 16
        a, offset = unpack_matrix(buf, offset)
        b, offset = unpack_matrix(buf, offset)
        c, offset = unpack_matrix(buf, offset)
        triples[name] = MatrixTripleShare(a, b, c, triple_id)
    return PartyOffline(
        client_id=client_id,
        party=party,
        parties=parties,
        fraction_bits=fraction_bits,
        n_max=n_max,
        am=AMPool(am_arrays["r_add"], am_arrays["r_mul"], am_cursor),
        trunc=TruncationPool(trunc_arrays["r_full"], trunc_arrays["r_high"], trunc_cursor),
        cmp=ComparePool(
            cmp_arrays["scale_sign"],
            cmp_arrays["sign_bit"],
            cmp_arrays["trip_a"],
            cmp_arrays["trip_b"],
            cmp_arrays["trip_c"],
            cmp_cursor,
        ),
        matrix_triples=triples,
    )
