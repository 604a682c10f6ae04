import numpy as np
import pytest
from conftest import minimal_descriptor, run_lockstep, run_mpl

import cryptgnn.mpl as mpl_mod
from cryptgnn.client import assemble_upload, random_graph
from cryptgnn.field import FixedPointCodec, MODULUS
from cryptgnn.mpl import (
    EdgeBatchesParty,
    _scatter_add_mod,
    read_extract,
    read_init,
    read_touch,
    secure_aggregate,
    write_finalize,
    write_init,
    write_touch,
)
from cryptgnn.prf import SeededPrf
from cryptgnn.provider import generate_offline
from cryptgnn.reference import mpl_field_oracle, mpl_reference
from cryptgnn.sharing import reconstruct_additive
from cryptgnn.wire import Tag, unpack_matrices

CODEC = FixedPointCodec(16)
SEED = b"\x41" * 32


@pytest.fixture
def zero_noise(monkeypatch):
    monkeypatch.setattr(mpl_mod, "_ZERO_NOISE_HOOK", True)


def _single_edge_batches(n_nodes, src_share, dst_share):
    return EdgeBatchesParty(
        n_nodes=n_nodes,
        batch_size=1,
        src_first=np.array([src_share], dtype=np.uint64),
        dst_first=np.array([dst_share], dtype=np.uint64),
        src_rel=np.array([0], dtype=np.uint64),
        dst_rel=np.array([0], dtype=np.uint64),
    )


class TestRingWalkthrough:
    """Hand-worked 3-party example on a 4-node, 2-feature graph.

    Index shares (3, 2, 3) for source node 0 and (1, 1, 3) for
    destination node 1 (both mod 4); per-party read rotations 2, 3, 2.
    Worked by hand: the travelling read index accumulates to 15, which in
    1-based terms is row 4; the write lands on 1-based row 2.
    """

    ROTATIONS = [2, 3, 2]
    SRC_SHARES = [3, 2, 3]
    DST_SHARES = [1, 1, 3]

    def _run_read(self, monkeypatch, features):
        monkeypatch.setattr(mpl_mod, "_ZERO_NOISE_HOOK", False)
        monkeypatch.setattr(
            mpl_mod, "_noise", lambda prf, layer, pn, hop, shape: np.zeros(shape, dtype=np.uint64)
        )
        rotations = self.ROTATIONS

        def fixed_rot(prf, layer, pass_name, hop, count, bound):
            return np.full(count, rotations[fixed_rot.calls], dtype=np.uint64) if False else None

        # rotation sequence keyed by which party acts (init, then hops)
        calls = {"i": 0}

        def rot(prf, layer, pass_name, hop, count, bound):
            value = rotations[calls["i"]]
            calls["i"] += 1
            return np.full(count, value, dtype=np.uint64)

        monkeypatch.setattr(mpl_mod, "_rotations", rot)
        prf = SeededPrf(SEED)
        edges = [_single_edge_batches(4, s, d) for s, d in zip(self.SRC_SHARES, self.DST_SHARES)]
        stack, acc = read_init(prf, 0, features, edges[0])
        for hop in (1, 2):
            stack, acc = read_touch(prf, 0, stack, acc, hop, edges[hop])
        return stack, acc, edges

    def test_accumulated_index_matches_hand_value(self, monkeypatch):
        features = CODEC.encode(np.arange(8, dtype=np.float64).reshape(4, 2))
        stack, acc, edges = self._run_read(monkeypatch, features)
        assert int(acc[0]) == 15  # (3+2) + (2+3) + (3+2)
        assert int(acc[0]) % 4 == 4 - 1  # 1-based row 4
        y = read_extract(stack, acc, edges[0])
        assert np.array_equal(y[0], features[0])  # source node (1-based node 1)

    def test_write_lands_on_row_two(self, monkeypatch):
        features = CODEC.encode(np.arange(8, dtype=np.float64).reshape(4, 2))
        stack, acc, edges = self._run_read(monkeypatch, features)
        y = read_extract(stack, acc, edges[0])
        wstack = write_init(SeededPrf(SEED), 0, y, edges[0])
        for hop in (1, 2):
            wstack = write_touch(SeededPrf(SEED), 0, wstack, hop, edges[hop])
        out = write_finalize(wstack)
        landing = (sum(self.DST_SHARES)) % 4
        assert landing == 2 - 1  # 1-based row 2
        assert np.array_equal(out[landing], features[0])
        assert np.all(out[[0, 2, 3]] == 0)

    def test_full_protocol_on_toy_graph(self):
        # same toy graph with real noise: one edge from node 0 to node 1
        features = np.arange(8, dtype=np.float64).reshape(4, 2) / 4.0
        graph = random_graph(SEED, 4, 2, 1)
        graph.features[:] = features
        graph.src[:] = [0]
        graph.dst[:] = [1]
        results, _, _ = run_mpl(graph, 3, 1, SEED)
        out = reconstruct_additive(results)
        expected = mpl_field_oracle(CODEC.encode(features), graph.src, graph.dst)
        assert np.array_equal(out, expected)
        assert np.array_equal(out[1], CODEC.encode(features)[0])
        assert np.all(out[[0, 2, 3]] == 0)


def test_identity_rotation_read_is_direct_lookup(zero_noise):
    features = SeededPrf(SEED).field_matrix((5, 3), "f")
    edges = _single_edge_batches(5, 2, 0)
    stack, acc = read_init(SeededPrf(SEED), 0, features, edges)
    y = read_extract(stack, acc, edges)
    assert np.array_equal(y[0], features[2])


def test_zero_destination_write_is_one_hot(zero_noise):
    y = SeededPrf(SEED).field_matrix((1, 3), "y")
    edges = _single_edge_batches(6, 0, 0)
    out = write_finalize(write_init(SeededPrf(SEED), 0, y, edges))
    assert np.array_equal(out[0], y[0])
    assert np.all(out[1:] == 0)


def test_secure_read_write_single_row_wrappers():
    """Oblivious one-row read then write across a 3-party ring: after
    subtracting the replayed noise, row A[4] sits at row 2, zeros elsewhere."""
    import cryptgnn.mpl as m
    from cryptgnn.field import sub_mod
    from cryptgnn.mpl import secure_read, secure_write
    from cryptgnn.sharing import split_additive, split_mod

    parties, n, k = 3, 6, 2
    features = SeededPrf(SEED).field_matrix((n, k), "sr-features")
    feat_shares = split_additive(features, parties, SeededPrf(SEED), "sr-shares")
    src_shares = split_mod(np.array([4]), n, parties, SeededPrf(SEED), "sr-src")
    dst_shares = split_mod(np.array([2]), n, parties, SeededPrf(SEED), "sr-dst")
    seeds = [SeededPrf(SEED).derive_seed("party", p) for p in range(parties)]

    def worker(session):
        p = session.ring.my_index
        prf = SeededPrf(seeds[p])
        y = secure_read(session, prf, 0, feat_shares[p], int(src_shares[p][0]))
        g = secure_write(session, prf.child("w"), 0, y, int(dst_shares[p][0]), n)
        return y, g

    results, _ = run_lockstep(parties, worker)
    y_total = reconstruct_additive([r[0] for r in results])
    assert not np.array_equal(y_total[0], features[4])  # read noise still embedded

    per_party = [
        _single_edge_batches(n, int(src_shares[p][0]), int(dst_shares[p][0]))
        for p in range(parties)
    ]
    # replay the noise with the same per-op child derivations the wrappers use
    noise = np.zeros((n, k), dtype=np.uint64)
    for pipeline in range(parties):
        prfs_r = [SeededPrf(s).child("edge", 0) for s in seeds]
        prfs_w = [SeededPrf(s).child("w", "edge", 0) for s in seeds]
        stack, acc = m.read_init(prfs_r[pipeline], 0, np.zeros((n, k), dtype=np.uint64), per_party[pipeline])
        for hop in range(1, parties):
            q = (pipeline + hop) % parties
            stack, acc = m.read_touch(prfs_r[q], 0, stack, acc, hop, per_party[q])
        y_noise = m.read_extract(stack, acc, per_party[0])
        wstack = m.write_init(prfs_w[pipeline], 0, y_noise, per_party[pipeline])
        for hop in range(1, parties):
            q = (pipeline + hop) % parties
            wstack = m.write_touch(prfs_w[q], 0, wstack, hop, per_party[q])
        noise = secure_aggregate(noise, m.write_finalize(wstack))
    g_total = reconstruct_additive([r[1] for r in results])
    cleaned = sub_mod(g_total, noise)
    assert np.array_equal(cleaned[2], features[4])
    assert np.all(cleaned[[0, 1, 3, 4, 5]] == 0)


def test_secure_aggregate_is_local_addition():
    a = SeededPrf(SEED).field_matrix((3, 2), "a")
    b = SeededPrf(SEED).field_matrix((3, 2), "b")
    out = secure_aggregate(a, b)
    assert int(out[0, 0]) == (int(a[0, 0]) + int(b[0, 0])) % MODULUS


def test_scatter_add_mod_handles_heavy_duplicates():
    stack = np.zeros((2, 3, 1), dtype=np.uint64)
    cells = np.zeros(50, dtype=np.int64)  # all edges hit batch 0, row 0
    values = np.full((50, 1), MODULUS - 1, dtype=np.uint64)
    out = _scatter_add_mod(stack, cells, values)
    assert int(out[0, 0, 0]) == (50 * (MODULUS - 1)) % MODULUS
    assert np.all(out[0, 1:] == 0) and np.all(out[1] == 0)


def test_crypt_mpl_single_self_loop():
    """Unbatched layer wrapper: one i -> i edge copies row i, zeros elsewhere."""
    from cryptgnn.client import split_batches, batch_edges, assemble_upload
    from cryptgnn.mpl import crypt_mpl

    graph = random_graph(SEED, 5, 2, 1)
    graph.src[:] = [3]
    graph.dst[:] = [3]
    descriptor = minimal_descriptor(2)
    uploads = assemble_upload(graph, descriptor, 3, 1, SEED, b"\x0e" * 16)

    def worker(session):
        p = session.ring.my_index
        up = uploads[p]
        return crypt_mpl(
            session,
            SeededPrf(up.seed),
            0,
            up.x_share,
            up.edges.src_first,
            up.edges.dst_first,
            up.noise_effect_shares[0],
        )

    results, _ = run_lockstep(3, worker)
    out = reconstruct_additive(results)
    expected = CODEC.encode(graph.features)
    assert np.array_equal(out[3], expected[3])
    assert np.all(out[[0, 1, 2, 4]] == 0)


@pytest.mark.parametrize("parties,n_batches", [(2, 1), (3, 5), (5, 20), (3, 1)])
def test_mpl_exactness_random_graphs(parties, n_batches):
    graph = random_graph(bytes([parties]) * 32, 40, 4, 120)
    results, _, sessions = run_mpl(graph, parties, n_batches, SEED)
    out = reconstruct_additive(results)
    expected = mpl_field_oracle(CODEC.encode(graph.features), graph.src, graph.dst)
    assert np.array_equal(out, expected)
    # decoded values agree with the real-arithmetic reference up to the
    # per-edge feature encoding error (about degree * 2^-17)
    plain = mpl_reference(graph.features, graph.src, graph.dst)
    assert np.max(np.abs(CODEC.decode(out) - plain)) < 1e-4


def test_rounds_per_layer_is_two_ring_passes():
    for parties in (2, 3, 5):
        for n_batches in (1, 7):
            graph = random_graph(SEED, 12, 2, 30)
            _, _, sessions = run_mpl(graph, parties, n_batches, SEED)
            for s in sessions:
                assert s.transcript.rounds_used == 2 * (parties - 1)


def test_batching_self_consistency_across_r():
    graph = random_graph(SEED, 30, 3, 200)
    outputs = []
    for n_batches in (1, 5, 200):
        results, _, _ = run_mpl(graph, 3, n_batches, SEED)
        outputs.append(reconstruct_additive(results))
    assert np.array_equal(outputs[0], outputs[1])
    assert np.array_equal(outputs[0], outputs[2])


def test_empty_edge_list_gives_zero_output():
    graph = random_graph(SEED, 6, 2, 0)
    results, _, sessions = run_mpl(graph, 3, 1, SEED)
    assert np.all(reconstruct_additive(results) == 0)
    assert sessions[0].transcript.rounds_used == 4


def test_wire_payloads_are_masked():
    """No hop payload may equal the sender's raw share stack."""
    graph = random_graph(SEED, 10, 2, 8)
    parties = 3
    descriptor = minimal_descriptor(2)
    uploads = assemble_upload(graph, descriptor, parties, 2, SEED, b"\x0b" * 16)
    seen = []

    def worker(session):

        p = session.ring.my_index
        up = uploads[p]
        original_send = session.send

        def spying_send(peer, tag, payload):
            if tag in (Tag.READ_PASS, Tag.WRITE_PASS):
                seen.append((p, tag, payload))
            original_send(peer, tag, payload)

        session.send = spying_send
        from cryptgnn.mpl import batch_crypt_mpl

        return batch_crypt_mpl(
            session, SeededPrf(up.seed), 0, up.x_share, up.edges, up.noise_effect_shares[0]
        )

    run_lockstep(parties, worker)
    assert seen
    for p, tag, payload in seen:
        if tag == Tag.READ_PASS:
            stack2d = unpack_matrices(payload, 2)[0]
            raw = np.broadcast_to(uploads[p].x_share, (2,) + uploads[p].x_share.shape)
            assert not np.array_equal(stack2d.reshape(raw.shape), raw)


def test_noise_streams_differ_across_hops():
    prf = SeededPrf(SEED)
    n0 = mpl_mod._noise(prf, 0, "read", 0, (2, 4, 2))
    n1 = mpl_mod._noise(prf, 0, "read", 1, (2, 4, 2))
    assert not np.array_equal(n0, n1)


class TestWeighted:
    def _offlines(self, graph, parties, seed):
        k = graph.n_feats
        need_am = 3 * graph.n_edges * k
        need_trunc = graph.n_nodes * k
        return generate_offline(seed, "w", parties, need_am, need_trunc, 0, 16, 64, {})

    def test_unit_weights_match_unweighted_within_one_ulp(self):
        base = random_graph(SEED, 15, 3, 40)
        plain_results, _, _ = run_mpl(base, 3, 4, SEED)
        unweighted = CODEC.decode(reconstruct_additive(plain_results))

        weighted_graph = random_graph(SEED, 15, 3, 40, weighted=True)
        weighted_graph.features[:] = base.features
        weighted_graph.src[:] = base.src
        weighted_graph.dst[:] = base.dst
        weighted_graph.weights[:] = 1.0
        offlines = self._offlines(weighted_graph, 3, b"\x42" * 32)
        results, _, _ = run_mpl(weighted_graph, 3, 4, SEED, offlines=offlines)
        got = CODEC.decode(reconstruct_additive(results))
        assert np.max(np.abs(got - unweighted)) <= 2 ** -CODEC.fraction_bits

    def test_zero_weight_fake_edges_change_nothing(self):
        # padding must not perturb the result: same client session and the
        # same dealer streams, only the edge list grows. Output equality is
        # exact because zero weights contribute zero before truncation and
        # the truncation masks are unchanged.
        graph = random_graph(SEED, 12, 2, 25, weighted=True)
        offlines = self._offlines(graph, 3, b"\x43" * 32)
        results, _, _ = run_mpl(graph, 3, 5, SEED, offlines=offlines)
        base_out = reconstruct_additive(results)

        from cryptgnn.client import pad_with_fake_edges

        padded = pad_with_fake_edges(graph, 40, b"\x44" * 32)
        assert padded.n_edges == 40
        offlines2 = self._offlines(padded, 3, b"\x43" * 32)
        results2, _, _ = run_mpl(padded, 3, 5, SEED, offlines=offlines2)
        assert np.array_equal(reconstruct_additive(results2), base_out)

    def test_random_weighted_graphs_match_oracle(self):
        graph = random_graph(b"\x46" * 32, 20, 3, 60, weighted=True)
        offlines = self._offlines(graph, 2, b"\x47" * 32)
        results, _, _ = run_mpl(graph, 2, 6, SEED, offlines=offlines)
        got = CODEC.decode(reconstruct_additive(results))
        expected = mpl_reference(graph.features, graph.src, graph.dst, graph.weights)
        # encoding error of features/weights plus one post-truncation unit
        assert np.max(np.abs(got - expected)) <= 2 ** (-CODEC.fraction_bits + 1) + 1e-4
