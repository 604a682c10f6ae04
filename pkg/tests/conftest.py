import threading

import numpy as np
import pytest

from cryptgnn.client import assemble_upload
from cryptgnn.mpl import batch_crypt_mpl
from cryptgnn.prf import SeededPrf
from cryptgnn.transport import LoopbackHub


def minimal_descriptor(n_feats: int, fraction_bits: int = 16) -> dict:
    """Single message-passing block with no transforms, for MPL-only runs."""
    return {
        "fraction_bits": fraction_bits,
        "input_dim": n_feats,
        "classes": n_feats,
        "readout": "none",
        "blocks": [{"layers": []}],
        "head": {"layers": []},
    }


def run_lockstep(parties: int, worker, timeout: float = 60.0, hub: LoopbackHub = None,
                 session_id: bytes = b"\x09" * 16):
    """Run one callable per party thread over a loopback hub."""
    hub = hub or LoopbackHub(parties)
    sessions = hub.sessions(session_id)
    results = [None] * parties
    errors = []

    def _run(p):
        try:
            results[p] = worker(sessions[p])
        except Exception as exc:
            errors.append(exc)
            hub.abort(repr(exc))

    threads = [threading.Thread(target=_run, args=(p,)) for p in range(parties)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout)
    if errors:
        raise errors[0]
    return results, sessions


def run_mpl(graph, parties, n_batches, client_seed, offlines=None, fraction_bits=16,
            session_id=b"\x0a" * 16, capture=None):
    """Full single-layer MPL over loopback; returns per-party output shares,
    uploads, and sessions."""
    descriptor = minimal_descriptor(graph.n_feats, fraction_bits)
    uploads = assemble_upload(graph, descriptor, parties, n_batches, client_seed, session_id)

    def worker(session):
        p = session.ring.my_index
        up = uploads[p]
        return batch_crypt_mpl(
            session,
            SeededPrf(up.seed),
            0,
            up.x_share,
            up.edges,
            up.noise_effect_shares[0],
            weights_share=up.weights_share,
            offline=offlines[p] if offlines else None,
            fraction_bits=fraction_bits,
        )

    results, sessions = run_lockstep(parties, worker, session_id=session_id)
    return results, uploads, sessions


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(key=20240817))
