import numpy as np
import pytest

from cryptgnn.field import MODULUS, TRUNC_MAGNITUDE_BITS, STAT_SECURITY
from cryptgnn.kernels import matmul_mod, mul_mod
from cryptgnn.provider import (
    Dealer,
    PoolExhaustedError,
    generate_offline,
    load_party_offline,
    save_party_offline,
)
from cryptgnn.sharing import (
    reconstruct_additive,
    reconstruct_multiplicative,
)

SEED = b"\x31" * 32

def test_matrix_triple_product_relation():
    dealer = Dealer(SEED, 3)
    shares = dealer.matrix_triples("alice", "lin0", 8, 3, 5)
    a = reconstruct_additive([s.a for s in shares])
    b = reconstruct_additive([s.b for s in shares])
    c = reconstruct_additive([s.c for s in shares])
    assert np.array_equal(matmul_mod(a, b), c)
    assert all(s.triple_id == shares[0].triple_id for s in shares)

def test_trivial_triple_scalar_case():
    dealer = Dealer(SEED, 2)
    shares = dealer.matrix_triples("alice", "one", 1, 1, 1)
    a = int(reconstruct_additive([s.a for s in shares])[0, 0])
    b = int(reconstruct_additive([s.b for s in shares])[0, 0])
    c = int(reconstruct_additive([s.c for s in shares])[0, 0])
    assert (a * b) % MODULUS == c

def test_triples_independent_per_client():
    dealer = Dealer(SEED, 2)
    s1 = dealer.matrix_triples("alice", "lin0", 4, 2, 2)
    s2 = dealer.matrix_triples("bob", "lin0", 4, 2, 2)
    a1 = reconstruct_additive([s.a for s in s1])
    a2 = reconstruct_additive([s.a for s in s2])
    assert not np.array_equal(a1, a2)

@pytest.mark.parametrize("parties", [2, 3, 5])
def test_am_pairs_additive_equals_multiplicative(parties):
    pools = generate_offline(SEED, "alice", parties, 64, 0, 0, 16, 16, {})
    r_add = reconstruct_additive([np.atleast_2d(p.am.arrays["r_add"]) for p in pools])
    r_mul = reconstruct_multiplicative([np.atleast_2d(p.am.arrays["r_mul"]) for p in pools])
    assert np.array_equal(r_add, r_mul)
    assert np.all(r_add != 0)

def test_am_pair_matches_pairwise_sum_oracle():
    # with 3 parties, R = (X_0 + X_1) * (X_1' + X_2) where the dealer may
    # resample; verify via the dealt level shares rather than raw draws
    parties = 3
    pools = generate_offline(SEED, "carol", parties, 16, 0, 0, 16, 16, {})
    r = reconstruct_additive([np.atleast_2d(p.am.arrays["r_add"]) for p in pools]).ravel()
    assert np.all(r != 0)


def test_two_party_pair_with_injected_inputs():
    # X_0 = 3 and X_1 = 4 must yield R = 7 in both sharings
    import threading

    from cryptgnn.provider import msas_pair_batch
    from cryptgnn.transport import LoopbackHub

    dealer = Dealer(SEED, 2)
    materials = dealer.msas_materials(
        "inj", 1, [np.array([3], dtype=np.uint64), np.array([4], dtype=np.uint64)]
    )
    hub = LoopbackHub(2)
    sessions = hub.sessions(b"\x0d" * 16)
    pools = [None, None]

    def worker(p):
        pools[p] = msas_pair_batch(sessions[p], materials[p], 1)

    threads = [threading.Thread(target=worker, args=(p,)) for p in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    r_add = reconstruct_additive([np.atleast_2d(p.arrays["r_add"]) for p in pools])
    r_mul = reconstruct_multiplicative([np.atleast_2d(p.arrays["r_mul"]) for p in pools])
    assert int(r_add[0, 0]) == 7
    assert int(r_mul[0, 0]) == 7

def test_pool_cursor_monotone_and_exhaustion():
    pools = generate_offline(SEED, "alice", 2, 12, 0, 0, 16, 16, {})
    pool = pools[0].am
    pool.take(3, "mul-1")
    pool.take(3, "mul-2")
    assert pool.cursor == 6
    spans = [(start, start + n) for _, start, n in pool.audit_log]
    assert spans == [(0, 3), (3, 6)]
    with pytest.raises(PoolExhaustedError):
        pool.take(7, "mul-3")

def test_truncation_pair_relation():
    dealer = Dealer(SEED, 3)
    f = 16
    pools = dealer.truncation_pools("alice", 256, f)
    r_full = reconstruct_additive([np.atleast_2d(p.arrays["r_full"]) for p in pools]).ravel()
    r_high = reconstruct_additive([np.atleast_2d(p.arrays["r_high"]) for p in pools]).ravel()
    assert np.array_equal(r_high, r_full >> np.uint64(f))
    assert int(r_full.max()) < 1 << (TRUNC_MAGNITUDE_BITS + STAT_SECURITY)

def test_compare_bundle_relation():
    dealer = Dealer(SEED, 2)
    pools = dealer.compare_pools("alice", 128)
    ss = reconstruct_additive([np.atleast_2d(p.arrays["scale_sign"]) for p in pools]).ravel()
    bit = reconstruct_additive([np.atleast_2d(p.arrays["sign_bit"]) for p in pools]).ravel()
    a = reconstruct_additive([np.atleast_2d(p.arrays["trip_a"]) for p in pools]).ravel()
    b = reconstruct_additive([np.atleast_2d(p.arrays["trip_b"]) for p in pools]).ravel()
    c = reconstruct_additive([np.atleast_2d(p.arrays["trip_c"]) for p in pools]).ravel()
    assert np.array_equal(mul_mod(a, b), c)
    for s, flag in zip(ss, bit):
        signed = int(s) if int(s) <= MODULUS // 2 else int(s) - MODULUS
        assert flag in (0, 1)
        assert (signed > 0) == (flag == 1)
        assert 0 < abs(signed) < 1 << 20

def test_pool_files_roundtrip_byte_identical(tmp_path):
    pools = generate_offline(SEED, "alice", 3, 32, 16, 8, 16, 16, {"lin0": (3, 5)})
    path = tmp_path / "pool_p1.bin"
    save_party_offline(path, pools[1])
    loaded = load_party_offline(path)
    assert loaded.client_id == "alice"
    assert loaded.party == 1 and loaded.parties == 3
    save_party_offline(tmp_path / "again.bin", loaded)
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()
    assert np.array_equal(loaded.am.arrays["r_add"], pools[1].am.arrays["r_add"])
    assert np.array_equal(loaded.matrix_triples["lin0"].b, pools[1].matrix_triples["lin0"].b)

def test_empty_pools_roundtrip(tmp_path):
    pools = generate_offline(SEED, "alice", 2, 0, 0, 0, 16, 16, {})
    save_party_offline(tmp_path / "empty.bin", pools[0])
    loaded = load_party_offline(tmp_path / "empty.bin")
    assert loaded.am.size == 0 and loaded.trunc.size == 0 and loaded.cmp.size == 0
