import numpy as np
import pytest

from cryptgnn.client import (
    GraphFormatError,
    assemble_upload,
    batch_edges,
    load_graph,
    load_upload,
    pad_with_fake_edges,
    random_graph,
    reconstruct_result,
    save_graph,
    save_upload,
    split_batches,
    with_self_loops,
)
from cryptgnn.field import FixedPointCodec
from cryptgnn.mpl import simulate_noise_effect
from cryptgnn.prf import SeededPrf
from cryptgnn.sharing import reconstruct_additive, reconstruct_mod
from conftest import minimal_descriptor

SEED = b"\x81" * 32
CODEC = FixedPointCodec(16)
SID = b"\x0c" * 16


def toy_graph_file(tmp_path, body):
    path = tmp_path / "g.txt"
    path.write_text(body)
    return path


def test_load_toy_graph(tmp_path):
    body = "4 2 1 directed\n0 1\n2 3\n4 5\n6 7\n0 1\n"
    graph = load_graph(toy_graph_file(tmp_path, body))
    assert graph.n_nodes == 4 and graph.n_feats == 2 and graph.n_edges == 1
    assert graph.src.tolist() == [0] and graph.dst.tolist() == [1]


def test_undirected_expands_both_ways(tmp_path):
    body = "3 1 1 undirected\n1\n2\n3\n0 2\n"
    graph = load_graph(toy_graph_file(tmp_path, body))
    assert graph.n_edges == 2
    assert sorted(zip(graph.src.tolist(), graph.dst.tolist())) == [(0, 2), (2, 0)]


def test_weighted_graph_roundtrip(tmp_path):
    graph = random_graph(SEED, 5, 3, 7, weighted=True)
    save_graph(tmp_path / "w.txt", graph)
    loaded = load_graph(tmp_path / "w.txt")
    assert np.allclose(loaded.features, graph.features)
    assert np.allclose(loaded.weights, graph.weights)


def test_out_of_range_index_rejected(tmp_path):
    body = "2 1 1 directed\n1\n2\n0 5\n"
    with pytest.raises(GraphFormatError):
        load_graph(toy_graph_file(tmp_path, body))


def test_nan_features_rejected(tmp_path):
    body = "2 1 1 directed\nnan\n2\n0 1\n"
    with pytest.raises(GraphFormatError):
        load_graph(toy_graph_file(tmp_path, body))


def test_empty_edge_list_is_valid(tmp_path):
    body = "2 1 0 directed\n1\n2\n"
    graph = load_graph(toy_graph_file(tmp_path, body))
    assert graph.n_edges == 0


def test_with_self_loops():
    graph = random_graph(SEED, 4, 2, 3)
    looped = with_self_loops(graph)
    assert looped.n_edges == 7
    assert looped.src[-4:].tolist() == [0, 1, 2, 3]
    assert looped.dst[-4:].tolist() == [0, 1, 2, 3]


class TestBatching:
    def test_six_edges_two_batches(self):
        src = np.array([3, 4, 5, 1, 2, 0])
        dst = np.array([0, 1, 2, 3, 4, 5])
        batches = batch_edges(src, dst, 6, 2)
        assert batches.batch_size == 3
        assert batches.n_batches == 2
        assert batches.src_rel[0] == 0 and batches.src_rel[3] == 0
        assert batches.dst_rel[0] == 0 and batches.dst_rel[3] == 0

    def test_one_batch_per_edge_all_relatives_zero(self):
        src = np.array([3, 1, 4])
        batches = batch_edges(src, src, 5, 3)
        assert batches.batch_size == 1
        assert np.all(batches.src_rel == 0)

    def test_roundtrip_recovers_indices(self):
        graph = random_graph(SEED, 17, 2, 55)
        batches = batch_edges(graph.src, graph.dst, 17, 7)
        batch_of = np.arange(55) // batches.batch_size
        src_back = (batches.src_first[batch_of] + batches.src_rel) % 17
        dst_back = (batches.dst_first[batch_of] + batches.dst_rel) % 17
        assert np.array_equal(src_back.astype(np.int64), graph.src)
        assert np.array_equal(dst_back.astype(np.int64), graph.dst)

    def test_share_split_reconstructs_firsts(self):
        graph = random_graph(SEED, 11, 2, 20)
        batches = batch_edges(graph.src, graph.dst, 11, 4)
        views = split_batches(batches, 3, SeededPrf(SEED))
        firsts = reconstruct_mod([v.src_first for v in views], 11)
        assert np.array_equal(firsts, batches.src_first)


class TestUpload:
    def test_features_reconstruct(self):
        graph = random_graph(SEED, 9, 3, 14)
        uploads = assemble_upload(graph, minimal_descriptor(3), 3, 4, SEED, SID)
        feats = reconstruct_additive([u.x_share for u in uploads])
        assert np.array_equal(feats, CODEC.encode(graph.features))
        seeds = {u.seed for u in uploads}
        assert len(seeds) == 3

    def test_noise_effect_shares_match_simulation(self):
        graph = random_graph(SEED, 7, 2, 9)
        uploads = assemble_upload(graph, minimal_descriptor(2), 3, 3, SEED, SID)
        total = reconstruct_additive([u.noise_effect_shares[0] for u in uploads])
        resim = simulate_noise_effect(
            [u.seed for u in uploads], 0, [u.edges for u in uploads], 7, 2
        )
        assert np.array_equal(total, resim)

    def test_bundle_file_roundtrip(self, tmp_path):
        graph = random_graph(SEED, 6, 2, 8, weighted=True)
        uploads = assemble_upload(graph, minimal_descriptor(2), 2, 2, SEED, SID)
        path = tmp_path / "bundle0.bin"
        save_upload(path, uploads[0])
        loaded = load_upload(path)
        assert loaded.session_id == SID
        assert np.array_equal(loaded.x_share, uploads[0].x_share)
        assert np.array_equal(loaded.edges.src_rel, uploads[0].edges.src_rel)
        assert np.array_equal(loaded.weights_share, uploads[0].weights_share)
        assert loaded.seed == uploads[0].seed
        save_upload(tmp_path / "again.bin", loaded)
        assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()

    def test_distinct_master_seeds_change_every_share_block(self):
        graph = random_graph(SEED, 5, 2, 6)
        up1 = assemble_upload(graph, minimal_descriptor(2), 2, 2, b"\x82" * 32, SID)
        up2 = assemble_upload(graph, minimal_descriptor(2), 2, 2, b"\x83" * 32, SID)
        assert not np.array_equal(up1[0].x_share, up2[0].x_share)
        assert not np.array_equal(up1[0].edges.src_first, up2[0].edges.src_first)
        assert not np.array_equal(
            up1[0].noise_effect_shares[0], up2[0].noise_effect_shares[0]
        )


def test_pad_with_fake_edges_properties():
    graph = random_graph(SEED, 6, 2, 4)
    padded = pad_with_fake_edges(graph, 10, SEED)
    assert padded.n_edges == 10
    assert padded.weights is not None
    assert np.all(padded.weights[4:] == 0)
    assert np.all(padded.weights[:4] == 1.0)


def test_reconstruct_result_argmax_and_single_class():
    codec = FixedPointCodec(16)
    shares = [codec.encode(np.array([[2.0, 1.0]])), np.zeros((1, 2), dtype=np.uint64)]
    result = reconstruct_result(shares, 16)
    assert result["argmax"].tolist() == [0]
    single = reconstruct_result([codec.encode(np.array([[3.0]])), np.zeros((1, 1), dtype=np.uint64)], 16)
    assert single["probabilities"][0, 0] == 1.0
