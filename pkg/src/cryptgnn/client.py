"""Data-owner logic: graph ingestion, batching, noise preprocessing,
upload assembly, and result reconstruction.

Graph files are line-oriented text: a header `N K M directed|undirected
[weighted]`, N feature rows, then M edge rows `src dst [weight]`.
Undirected input expands every edge into both directions.

The owner splits features and indices into shares, groups edges into
batches with plaintext relative indices, replays the exact protocol
noise per message-passing block with the seeds it hands the parties,
and uploads a fresh re-sharing of the net noise effect so the parties
can subtract it.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from .field import FixedPointCodec
from .model import _chain_dims
from .mpl import EdgeBatchesParty, simulate_noise_effect
from .prf import SEED_BYTES, SeededPrf
from .sharing import split_additive, split_mod
from .wire import SESSION_ID_BYTES, pack_matrix, unpack_matrix


class GraphFormatError(ValueError):
    pass


@dataclass
class PlaintextGraph:
    features: np.ndarray  # (N, K) float64
    src: np.ndarray  # (M,) int64
    dst: np.ndarray
    weights: np.ndarray = None  # (M,) float64, optional
    directed: bool = True

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.src = np.asarray(self.src, dtype=np.int64)
        self.dst = np.asarray(self.dst, dtype=np.int64)
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def n_feats(self) -> int:
        return self.features.shape[1]

    @property
    def n_edges(self) -> int:
        return self.src.shape[0]

    def validate(self):
        if not np.all(np.isfinite(self.features)):
            raise GraphFormatError("non-finite feature values")
        for idx in (self.src, self.dst):
            if idx.size and (idx.min() < 0 or idx.max() >= self.n_nodes):
                raise GraphFormatError("edge index out of range")
        if self.src.shape != self.dst.shape:
            raise GraphFormatError("source/destination lists differ in length")
        if self.weights is not None and self.weights.shape != self.src.shape:
            raise GraphFormatError("one weight per edge required")


def load_graph(path) -> PlaintextGraph:
    with open(path, "r", encoding="utf-8") as fh:
        tokens = fh.read().split("\n")
    lines = [ln.strip() for ln in tokens if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise GraphFormatError("empty graph file")
    head = lines[0].split()
    if len(head) < 4:
        raise GraphFormatError("header must be: N K M directed|undirected [weighted]")
    n, k, m = (int(x) for x in head[:3])
    directed = head[3] == "directed"
    if head[3] not in ("directed", "undirected"):
        raise GraphFormatError(f"bad direction flag {head[3]!r}")
    weighted = len(head) > 4 and head[4] == "weighted"
    if len(lines) != 1 + n + m:
        raise GraphFormatError(f"expected {1 + n + m} lines, found {len(lines)}")
    try:
        features = np.array([[float(v) for v in lines[1 + i].split()] for i in range(n)])
    except ValueError as exc:
        raise GraphFormatError(f"bad feature row: {exc}") from exc
    if n and features.shape[1] != k:
        raise GraphFormatError("feature row width differs from header")
    src, dst, weights = [], [], []
    for j in range(m):
        parts = lines[1 + n + j].split()
        if len(parts) < 2 + (1 if weighted else 0):
            raise GraphFormatError(f"bad edge row {j}")
        src.append(int(parts[0]))
        dst.append(int(parts[1]))
        if weighted:
            weights.append(float(parts[2]))
    src = np.array(src, dtype=np.int64)
    dst = np.array(dst, dtype=np.int64)
    weights_arr = np.array(weights) if weighted else None
    if not directed:
        src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
        if weights_arr is not None:
            weights_arr = np.concatenate([weights_arr, weights_arr])
    graph = PlaintextGraph(features, src, dst, weights_arr, directed=True)
    graph.validate()
    return graph


def save_graph(path, graph: PlaintextGraph):
    graph.validate()
    weighted = graph.weights is not None
    lines = [
        f"{graph.n_nodes} {graph.n_feats} {graph.n_edges} directed"
        + (" weighted" if weighted else "")
    ]
    for row in graph.features:
        lines.append(" ".join(repr(float(v)) for v in row))
    for j in range(graph.n_edges):
        edge = f"{graph.src[j]} {graph.dst[j]}"
        if weighted:
            edge += f" {repr(float(graph.weights[j]))}"
        lines.append(edge)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def with_self_loops(graph: PlaintextGraph) -> PlaintextGraph:
    """Append one i -> i edge per node (weight 1 when weighted)."""
    loops = np.arange(graph.n_nodes, dtype=np.int64)
    weights = graph.weights
    if weights is not None:
        weights = np.concatenate([weights, np.ones(graph.n_nodes)])
    return PlaintextGraph(
        graph.features,
        np.concatenate([graph.src, loops]),
        np.concatenate([graph.dst, loops]),
        weights,
        directed=True,
    )


def pad_with_fake_edges(graph: PlaintextGraph, target_edges: int, seed: bytes) -> PlaintextGraph:
    """Hide the edge count: pad to target_edges with zero-weight edges."""
    extra = target_edges - graph.n_edges
    if extra <= 0:
        return graph
    prf = SeededPrf(seed, ("fake-edges",))
    fake_src = prf.integers(extra, graph.n_nodes, "src").astype(np.int64)
    fake_dst = prf.integers(extra, graph.n_nodes, "dst").astype(np.int64)
    weights = graph.weights if graph.weights is not None else np.ones(graph.n_edges)
    return PlaintextGraph(
        graph.features,
        np.concatenate([graph.src, fake_src]),
        np.concatenate([graph.dst, fake_dst]),
        np.concatenate([weights, np.zeros(extra)]),
        directed=True,
    )


def random_graph(seed: bytes, n_nodes: int, n_feats: int, n_edges: int, weighted: bool = False) -> PlaintextGraph:
    prf = SeededPrf(seed, ("random-graph",))
    raw = prf.field_matrix((n_nodes, n_feats), "features").astype(np.float64)
    features = (raw / float(2**61) - 0.5) * 2.0
    src = prf.integers(n_edges, n_nodes, "src").astype(np.int64)
    dst = prf.integers(n_edges, n_nodes, "dst").astype(np.int64)
    weights = None
    if weighted:
        weights = (prf.field_matrix(n_edges, "weights").astype(np.float64) / float(2**61) - 0.5) * 2.0
    return PlaintextGraph(features, src, dst, weights)


@dataclass
class ClientBatches:
    """Owner-side plaintext batch layout before sharing."""

    n_nodes: int
    batch_size: int
    src_first: np.ndarray  # (R,)
    dst_first: np.ndarray
    src_rel: np.ndarray  # (M,)
    dst_rel: np.ndarray

    @property
    def n_batches(self) -> int:
        return self.src_first.shape[0]


def batch_edges(src, dst, n_nodes: int, n_batches: int) -> ClientBatches:
    """Group edges; the first index of each batch stays secret, the rest
    become plaintext offsets relative to it (first offset always 0)."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    m = src.shape[0]
    if m == 0:
        return ClientBatches(
            n_nodes,
            1,
            np.zeros(1, dtype=np.uint64),
            np.zeros(1, dtype=np.uint64),
            np.zeros(0, dtype=np.uint64),
            np.zeros(0, dtype=np.uint64),
        )
    if not 1 <= n_batches <= m:
        n_batches = max(1, min(n_batches, m))
    size = math.ceil(m / n_batches)
    r_eff = math.ceil(m / size)
    batch_of = np.arange(m) // size
    first_idx = np.arange(r_eff) * size
    src_first = src[first_idx]
    dst_first = dst[first_idx]
    src_rel = (src - src_first[batch_of]) % n_nodes
    dst_rel = (dst - dst_first[batch_of]) % n_nodes
    return ClientBatches(
        n_nodes,
        size,
        src_first.astype(np.uint64),
        dst_first.astype(np.uint64),
        src_rel.astype(np.uint64),
        dst_rel.astype(np.uint64),
    )


def split_batches(batches: ClientBatches, parties: int, prf: SeededPrf) -> list:
    src_shares = split_mod(batches.src_first, batches.n_nodes, parties, prf, "src-first")
    dst_shares = split_mod(batches.dst_first, batches.n_nodes, parties, prf, "dst-first")
    return [
        EdgeBatchesParty(
            n_nodes=batches.n_nodes,
            batch_size=batches.batch_size,
            src_first=src_shares[p],
            dst_first=dst_shares[p],
            src_rel=batches.src_rel,
            dst_rel=batches.dst_rel,
        )
        for p in range(parties)
    ]


@dataclass
class GraphUploadParty:
    """Everything one computing party receives from the data owner."""

    session_id: bytes
    party: int
    parties: int
    fraction_bits: int
    x_share: np.ndarray
    edges: EdgeBatchesParty
    noise_effect_shares: list  # one (N, D_block) share per message-passing block
    seed: bytes
    weights_share: np.ndarray = None


def block_input_dims(descriptor: dict) -> list:
    block_dims, _ = _chain_dims(descriptor)
    return [descriptor["input_dim"]] + block_dims[:-1]


def precompute_noise(descriptor: dict, party_edges: list, seeds: list, n_nodes: int,
                     weights_enc=None) -> list:
    """Replay every message-passing block's noise flow with the party
    seeds; returns one reconstruction-level noise-effect matrix per block.
    Sharing these (freshly re-randomized) lets the parties cancel all
    injected masks exactly."""
    effects = []
    for bi, dim in enumerate(block_input_dims(descriptor)):
        effects.append(
            simulate_noise_effect(seeds, bi, party_edges, n_nodes, dim, weights_plain=weights_enc)
        )
    return effects


def assemble_upload(
    graph: PlaintextGraph,
    descriptor: dict,
    parties: int,
    n_batches: int,
    client_seed: bytes,
    session_id: bytes,
) -> list:
    """Split a graph for P parties: shared features and first indices,
    plaintext relative indices, per-party seeds, and noise-effect shares
    whose subtraction makes every message-passing block exact."""
    graph.validate()
    if len(session_id) != SESSION_ID_BYTES:
        raise ValueError("session id must be 16 bytes")
    codec = FixedPointCodec(descriptor["fraction_bits"])
    prf = SeededPrf(client_seed, ("upload", session_id))

    x_enc = codec.encode(graph.features)
    x_shares = split_additive(x_enc, parties, prf, "features")
    batches = batch_edges(graph.src, graph.dst, graph.n_nodes, n_batches)
    party_edges = split_batches(batches, parties, prf)
    seeds = [prf.derive_seed("party-seed", p) for p in range(parties)]

    weights_enc = None
    weight_shares = [None] * parties
    if graph.weights is not None:
        weights_enc = codec.encode(graph.weights)
        weight_shares = split_additive(weights_enc, parties, prf, "weights")

    effects = precompute_noise(descriptor, party_edges, seeds, graph.n_nodes, weights_enc)
    noise_shares_per_block = [
        split_additive(effect, parties, prf, "noise-effect", bi)
        for bi, effect in enumerate(effects)
    ]

    uploads = []
    for p in range(parties):
        uploads.append(
            GraphUploadParty(
                session_id=session_id,
                party=p,
                parties=parties,
                fraction_bits=descriptor["fraction_bits"],
                x_share=x_shares[p],
                edges=party_edges[p],
                noise_effect_shares=[ns[p] for ns in noise_shares_per_block],
                seed=seeds[p],
                weights_share=weight_shares[p],
            )
        )
    return uploads


_BUNDLE_MAGIC = b"CGUB"
_BUNDLE_VERSION = 1


def save_upload(path, upload: GraphUploadParty):
    e = upload.edges
    header = struct.pack(
        "<16sIIIIIIHHB",
        upload.session_id,
        upload.x_share.shape[0],
        upload.x_share.shape[1],
        e.n_edges,
        e.n_batches,
        e.batch_size,
        upload.fraction_bits,
        upload.party,
        upload.parties,
        1 if upload.weights_share is not None else 0,
    )
    parts = [_BUNDLE_MAGIC, struct.pack("<I", _BUNDLE_VERSION), header]
    parts.append(struct.pack("<H", len(upload.noise_effect_shares)))
    parts.append(pack_matrix(upload.x_share))
    parts.append(pack_matrix(e.src_first))
    parts.append(pack_matrix(e.dst_first))
    for share in upload.noise_effect_shares:
        parts.append(pack_matrix(share))
    if upload.weights_share is not None:
        parts.append(pack_matrix(upload.weights_share))
    parts.append(np.ascontiguousarray(e.src_rel, dtype="<u4").tobytes())
    parts.append(np.ascontiguousarray(e.dst_rel, dtype="<u4").tobytes())
    parts.append(upload.seed)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_upload(path) -> GraphUploadParty:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _BUNDLE_MAGIC:
        raise GraphFormatError("not an upload bundle")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != _BUNDLE_VERSION:
        raise GraphFormatError(f"unsupported bundle version {version}")
    offset = 8
    fmt = "<16sIIIIIIHHB"
    (
        session_id,
        n_nodes,
        n_feats,
        n_edges,
        n_batches,
        batch_size,
        fraction_bits,
        party,
        parties,
        weighted,
    ) = struct.unpack_from(fmt, buf, offset)
    offset += struct.calcsize(fmt)
    (n_blocks,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    x_share, offset = unpack_matrix(buf, offset)
    src_first, offset = unpack_matrix(buf, offset)
    dst_first, offset = unpack_matrix(buf, offset)
    noise_shares = []
    for _ in range(n_blocks):
        share, offset = unpack_matrix(buf, offset)
        noise_shares.append(share)
    weights_share = None
    if weighted:
        w, offset = unpack_matrix(buf, offset)
        weights_share = w.ravel()
    src_rel = np.frombuffer(buf, dtype="<u4", count=n_edges, offset=offset).astype(np.uint64)
    offset += 4 * n_edges
    dst_rel = np.frombuffer(buf, dtype="<u4", count=n_edges, offset=offset).astype(np.uint64)
    offset += 4 * n_edges
    seed = bytes(buf[offset : offset + SEED_BYTES])
    edges = EdgeBatchesParty(
        n_nodes=n_nodes,
        batch_size=batch_size,
        src_first=src_first.ravel(),
        dst_first=dst_first.ravel(),
        src_rel=src_rel,
        dst_rel=dst_rel,
    )
    if x_share.shape != (n_nodes, n_feats) or edges.n_batches != n_batches:
        raise GraphFormatError("bundle header inconsistent with payload")
    return GraphUploadParty(
        session_id=session_id,
        party=party,
        parties=parties,
        fraction_bits=fraction_bits,
        x_share=x_share,
        edges=edges,
        noise_effect_shares=noise_shares,
        seed=seed,
        weights_share=weights_share,
    )


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def reconstruct_result(logit_shares: list, fraction_bits: int) -> dict:
    """Combine the parties' result shares into class probabilities."""
    from .sharing import reconstruct_additive

    codec = FixedPointCodec(fraction_bits)
    logits = codec.decode(reconstruct_additive(logit_shares))
    probs = softmax(logits)
    return {
        "logits": logits,
        "probabilities": probs,
        "argmax": np.argmax(probs, axis=-1),
    }
