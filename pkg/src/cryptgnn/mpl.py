"""Oblivious message passing over secret-shared graphs.

One layer moves every edge's source-node feature vector to its
destination and aggregates, without revealing features or indices:

  read pass:  each party masks its share stack with fresh noise, rotates
              each batch matrix by a private random amount, adds its index
              share plus the same amount to a travelling accumulator, and
              forwards around the ring. After P-1 hops every party holds a
              fully mixed stack and reads the batch rows at
              (accumulator + relative index) mod N.
  write pass: read results are planted at the relative positions of a
              noise matrix, which each party rotates by its share of the
              batch's first destination index; after the ring pass the rows
              sit at the true destinations, buried in accumulated noise.

All injected noise is derived from per-party seeds, so the data owner
can replay the exact noise flow offline and hand the parties shares of
its net effect; subtracting that share makes the layer exact in the
field. Batches share one ring message per hop, so a layer costs
2*(P-1) rounds regardless of edge count or batch count.
"""

from dataclasses import dataclass

import numpy as np

from .field import MODULUS, add_mod, sub_mod, sum_mod
from .kernels import add_rotate_stack, mul_mod
from .prf import SeededPrf
from .sharing import ShapeMismatchError
from .transport import Session
from .wire import Tag, pack_matrices, unpack_matrices

# Test-only hook: zeroes protocol noise and rotations so unit tests can
# watch data move. Not reachable from any config or CLI surface.
_ZERO_NOISE_HOOK = False

_Q = np.uint64(MODULUS)


@dataclass
class EdgeBatchesParty:
    """One party's view of a batched edge list.

    First indices per batch are secret shares mod N; relative indices are
    plaintext with the first edge of every batch at relative 0. Edge t
    belongs to batch t // batch_size and its true index is
    (first + relative) mod N.
    """

    n_nodes: int
    batch_size: int
    src_first: np.ndarray  # (R,) shares mod N
    dst_first: np.ndarray  # (R,)
    src_rel: np.ndarray  # (M,) plaintext
    dst_rel: np.ndarray  # (M,)

    def __post_init__(self):
        self.src_first = np.asarray(self.src_first, dtype=np.uint64)
        self.dst_first = np.asarray(self.dst_first, dtype=np.uint64)
        self.src_rel = np.asarray(self.src_rel, dtype=np.uint64)
        self.dst_rel = np.asarray(self.dst_rel, dtype=np.uint64)
        n = np.uint64(self.n_nodes)
        for rel in (self.src_rel, self.dst_rel):
            if rel.size and int(rel.max()) >= self.n_nodes:
                raise ValueError("relative index out of [0, N)")
        if np.any(self.src_first >= n) or np.any(self.dst_first >= n):
            raise ValueError("first-index share out of [0, N)")
        if self.src_rel.shape != self.dst_rel.shape:
            raise ShapeMismatchError("relative index lists differ in length")

    @property
    def n_batches(self) -> int:
        return self.src_first.shape[0]

    @property
    def n_edges(self) -> int:
        return self.src_rel.shape[0]

    @property
    def edge_batch(self) -> np.ndarray:
        return np.arange(self.n_edges) // self.batch_size


def _noise(prf: SeededPrf, layer: int, pass_name: str, hop: int, shape):
    if _ZERO_NOISE_HOOK:
        return np.zeros(shape, dtype=np.uint64)
    return prf.field_matrix(shape, "mpl", layer, pass_name, "noise", hop)

def _rotations(prf: SeededPrf, layer: int, pass_name: str, hop: int, count: int, bound: int):
    if _ZERO_NOISE_HOOK:
        return np.zeros(count, dtype=np.uint64)
    return prf.integers(count, bound, "mpl", layer, pass_name, "rot", hop)


def _rotate_stack(stack: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    n_batches, n_rows, _ = stack.shape
    src = (
        np.arange(n_rows, dtype=np.int64)[None, :]
        - (shifts % n_rows).astype(np.int64)[:, None]
    ) % n_rows
    return stack[np.arange(n_batches)[:, None], src, :]


def _scatter_add_mod(stack: np.ndarray, cells: np.ndarray, values: np.ndarray) -> np.ndarray:
    """stack_flat[cells[t]] += values[t] mod q, safe under duplicate cells.

    uint64 holds at most seven raw additions onto a reduced entry, so
    edges are applied in waves of seven per cell with a fold in between.
    """
    r, n, k = stack.shape
    flat = stack.reshape(r * n, k).copy()
    if cells.size == 0:
        return flat.reshape(r, n, k)
    order = np.argsort(cells, kind="stable")
    sorted_cells = cells[order]
    first = np.searchsorted(sorted_cells, sorted_cells, side="left")
    ordinal = np.empty(cells.size, dtype=np.int64)
    ordinal[order] = np.arange(cells.size) - first
    for wave in range(0, int(ordinal.max()) + 1, 7):
        pick = (ordinal >= wave) & (ordinal < wave + 7)
        np.add.at(flat, cells[pick], values[pick])
        flat = (flat >> np.uint64(61)) + (flat & _Q)
        flat = np.where(flat >= _Q, flat - _Q, flat)
    return flat.reshape(r, n, k)


def read_init(prf, layer, a_share, edges):
    r, n = edges.n_batches, edges.n_nodes
    stack = np.broadcast_to(a_share, (r, n, a_share.shape[1]))
    rot = _rotations(prf, layer, "read", 0, r, n)
    stack = add_rotate_stack(stack, _noise(prf, layer, "read", 0, stack.shape), rot)
    acc = edges.src_first + rot
    return stack, acc


def read_touch(prf, layer, stack, acc, hop, edges):
    rot = _rotations(prf, layer, "read", hop, edges.n_batches, edges.n_nodes)
    stack = add_rotate_stack(stack, _noise(prf, layer, "read", hop, stack.shape), rot)
    return stack, acc + edges.src_first + rot


def read_extract(stack, acc, edges):
    n = np.uint64(edges.n_nodes)
    rows = (acc[edges.edge_batch] + edges.src_rel) % n
    return stack[edges.edge_batch, rows.astype(np.int64), :]


def write_init(prf, layer, y, edges):
    r, n, k = edges.n_batches, edges.n_nodes, y.shape[1]
    stack = _noise(prf, layer, "write", 0, (r, n, k))
    cells = edges.edge_batch * n + edges.dst_rel.astype(np.int64)
    stack = _scatter_add_mod(stack, cells, y)
    return _rotate_stack(stack, edges.dst_first)


def write_touch(prf, layer, stack, hop, edges):
    return add_rotate_stack(
        stack, _noise(prf, layer, "write", hop, stack.shape), edges.dst_first
    )


def write_finalize(stack):
    return sum_mod(stack, axis=0)


def _pack_read(stack, acc):
    return pack_matrices([stack, acc.reshape(1, -1)])


def _unpack_read(payload, r, n, k):
    stack2d, accrow = unpack_matrices(payload, 2)
    return stack2d.reshape(r, n, k), accrow.ravel()


def run_read_pass(session: Session, prf, layer, a_share, edges) -> np.ndarray:
    """Full read ring pass; returns this party's (M, K) share of the
    source features for every edge (pipeline labels permute around the
    ring, which reconstruction does not notice)."""
    r, n, k = edges.n_batches, edges.n_nodes, a_share.shape[1]
    stack, acc = read_init(prf, layer, a_share, edges)
    for hop in range(1, session.ring.parties):
        session.send_to_next(Tag.READ_PASS, _pack_read(stack, acc))
        del stack
        payload = session.receive_from_prev(Tag.READ_PASS)
        stack, acc = _unpack_read(payload, r, n, k)
        del payload
        stack, acc = read_touch(prf, layer, stack, acc, hop, edges)
    return read_extract(stack, acc, edges)


def run_write_pass(session: Session, prf, layer, y, edges) -> np.ndarray:
    r, n, k = edges.n_batches, edges.n_nodes, y.shape[1]
    stack = write_init(prf, layer, y, edges)
    for hop in range(1, session.ring.parties):
        session.send_to_next(Tag.WRITE_PASS, pack_matrices([stack]))
        del stack
        payload = session.receive_from_prev(Tag.WRITE_PASS)
        stack = unpack_matrices(payload, 1)[0].reshape(r, n, k)
        del payload
        stack = write_touch(prf, layer, stack, hop, edges)
    return write_finalize(stack)


def secure_aggregate(acc_share: np.ndarray, g_share: np.ndarray) -> np.ndarray:
    """Local share addition; costs no communication."""
    if acc_share.shape != g_share.shape:
        raise ShapeMismatchError(f"{acc_share.shape} vs {g_share.shape}")
    return add_mod(acc_share, g_share)


def secure_read(session, prf, layer, a_share, src_share: int, round_index: int = 0):
    """Oblivious single-row read; returns this party's share of A[src]."""
    edges = EdgeBatchesParty(
        n_nodes=a_share.shape[0],
        batch_size=1,
        src_first=np.array([src_share], dtype=np.uint64),
        dst_first=np.array([0], dtype=np.uint64),
        src_rel=np.array([0], dtype=np.uint64),
        dst_rel=np.array([0], dtype=np.uint64),
    )
    return run_read_pass(session, prf.child("edge", round_index), layer, a_share, edges)


def secure_write(session, prf, layer, y, dst_share: int, n_nodes: int, round_index: int = 0):
    """Oblivious single-row write of y into an otherwise-noise matrix."""
    edges = EdgeBatchesParty(
        n_nodes=n_nodes,
        batch_size=1,
        src_first=np.array([0], dtype=np.uint64),
        dst_first=np.array([dst_share], dtype=np.uint64),
        src_rel=np.array([0], dtype=np.uint64),
        dst_rel=np.array([0], dtype=np.uint64),
    )
    return run_write_pass(session, prf.child("edge", round_index), layer, y, edges)


def batch_crypt_mpl(
    session: Session,
    prf: SeededPrf,
    layer: int,
    a_share: np.ndarray,
    edges: EdgeBatchesParty,
    noise_effect_share: np.ndarray,
    weights_share: np.ndarray = None,
    offline=None,
    fraction_bits: int = None,
) -> np.ndarray:
    """One full message-passing layer on shares; exact in the field.

    With weights, each read result row is multiplied by the edge weight
    share (one extra opening round) and the final matrix is truncated back
    to working scale after noise removal.
    """
    session.transcript.mark_phase("mpl")
    y = run_read_pass(session, prf, layer, a_share, edges)
    if weights_share is not None:
        from .mul import elem_mul, truncate

        if weights_share.shape[0] != edges.n_edges:
            raise ShapeMismatchError("one weight share per edge required")
        session.transcript.mark_phase("mpl-weights")
        w = np.broadcast_to(weights_share.reshape(-1, 1), y.shape)
        y = elem_mul(session, y, w, offline, prf.child("mpl-weights", layer))
        session.transcript.mark_phase("mpl")
    g = run_write_pass(session, prf, layer, y, edges)
    out = sub_mod(g, noise_effect_share)
    if weights_share is not None:
        session.transcript.mark_phase("mpl-weights")
        out = truncate(session, out, offline.trunc, fraction_bits)
        session.transcript.mark_phase("mpl")
    return out


def crypt_mpl(
    session,
    prf,
    layer,
    a_share,
    src_shares,
    dst_shares,
    noise_effect_share,
    **kwargs,
):
    """Unbatched layer: every edge its own batch (relative indices zero)."""
    src_shares = np.asarray(src_shares, dtype=np.uint64)
    m = src_shares.shape[0]
    edges = EdgeBatchesParty(
        n_nodes=a_share.shape[0],
        batch_size=1,
        src_first=src_shares,
        dst_first=np.asarray(dst_shares, dtype=np.uint64),
        src_rel=np.zeros(m, dtype=np.uint64),
        dst_rel=np.zeros(m, dtype=np.uint64),
    )
    return batch_crypt_mpl(session, prf, layer, a_share, edges, noise_effect_share, **kwargs)


def weighted_mpl(session, prf, layer, a_share, edges, noise_effect_share, weights_share, offline, fraction_bits):
    return batch_crypt_mpl(
        session,
        prf,
        layer,
        a_share,
        edges,
        noise_effect_share,
        weights_share=weights_share,
        offline=offline,
        fraction_bits=fraction_bits,
    )


def simulate_noise_effect(
    seeds: list,
    layer: int,
    party_edges: list,
    n_nodes: int,
    n_feats: int,
    weights_plain: np.ndarray = None,
) -> np.ndarray:
    """Replay the exact protocol noise flow for one layer, offline.

    Runs the same init/touch/extract steps as the parties, per pipeline,
    with zero feature input, using each party's seed where that party
    would act. Returns the reconstruction-level net noise; sharing it and
    subtracting after the write pass cancels every injected mask.
    """
    parties = len(seeds)
    prfs = [SeededPrf(s) for s in seeds]
    total = np.zeros((n_nodes, n_feats), dtype=np.uint64)
    zero_features = np.zeros((n_nodes, n_feats), dtype=np.uint64)
    for pipeline in range(parties):
        stack, acc = read_init(prfs[pipeline], layer, zero_features, party_edges[pipeline])
        for hop in range(1, parties):
            p = (pipeline + hop) % parties
            stack, acc = read_touch(prfs[p], layer, stack, acc, hop, party_edges[p])
        y = read_extract(stack, acc, party_edges[0])
        if weights_plain is not None:
            y = mul_mod(y, weights_plain.reshape(-1, 1))
        wstack = write_init(prfs[pipeline], layer, y, party_edges[pipeline])
        for hop in range(1, parties):
            p = (pipeline + hop) % parties
            wstack = write_touch(prfs[p], layer, wstack, hop, party_edges[p])
        total = add_mod(total, write_finalize(wstack))
    return total
