"""End-to-end runs: offline sizing, client prep, P party workers, metrics.

Under the loopback backend the parties run as threads in this process;
under the socket backend they run as separate processes (one per party)
speaking the TCP transport, with inputs and results passed as files.
Every byte of every transcript and the final result are fixed by
(config, master seed).
"""

import json
import os
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .client import (
    PlaintextGraph,
    assemble_upload,
    load_upload,
    reconstruct_result,
    save_upload,
    with_self_loops,
)
from .layers import offline_requirements, run_gin
from .model import (
    PlainModel,
    linear_layer_shapes,
    load_model_bundle,
    save_model_bundle,
    split_model,
)
from .mpl import batch_crypt_mpl
from .prf import SEED_BYTES, SeededPrf
from .provider import generate_offline, load_party_offline, save_party_offline
from .transport import DEFAULT_TIMEOUT, LoopbackHub, ProtocolAbort, RingConfig, SocketSession
from .reference import run_reference


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    parties: int = 3
    n_batches: int = 20
    fraction_bits: int = 16
    n_max: int = 4096
    backend: str = "loopback"
    seed: bytes = b"\x00" * SEED_BYTES
    client_id: str = "client-0"
    pool_requests: int = 1
    timeout: float = DEFAULT_TIMEOUT
    host: str = "127.0.0.1"
    base_port: int = 0

    def validate(self):
        if self.parties < 2:
            raise ConfigError("need at least 2 parties")
        if self.n_batches < 1:
            raise ConfigError("need at least 1 batch")
        if self.backend not in ("loopback", "socket"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if len(self.seed) != SEED_BYTES:
            raise ConfigError(f"seed must be {SEED_BYTES} bytes")
        if not 1 <= self.fraction_bits <= 24:
            raise ConfigError("fraction bits out of range")


@dataclass
class InferenceOutcome:
    result: dict
    transcripts: list
    timings_ms: dict
    session_id: bytes
    logit_shares: list = field(default_factory=list)

    def metrics(self) -> dict:
        return {
            "session_id": self.session_id.hex(),
            "argmax": np.asarray(self.result["argmax"]).tolist(),
            "logits": np.asarray(self.result["logits"]).tolist(),
            "timings_ms": self.timings_ms,
            "transcripts": self.transcripts,
        }


def _run_seeds(config: RunConfig):
    root = SeededPrf(config.seed, ("run",))
    return {
        "model": root.derive_seed("model-split"),
        "offline": root.derive_seed("offline"),
        "client": root.derive_seed("client"),
        "root": root,
    }


def session_id_for(config: RunConfig, request_index: int) -> bytes:
    return _run_seeds(config)["root"].derive_seed("session", request_index)[:16]


def prepare_offline(config: RunConfig, descriptor: dict, n_nodes: int, n_edges: int, weighted: bool):
    """Size pools from the architecture and deal all offline material."""
    need = offline_requirements(descriptor, n_nodes, n_edges, weighted)
    reqs = max(1, config.pool_requests)
    return generate_offline(
        _run_seeds(config)["offline"],
        config.client_id,
        config.parties,
        need["am_pairs"] * reqs,
        need["trunc_pairs"] * reqs,
        need["cmp_bundles"] * reqs,
        config.fraction_bits,
        config.n_max,
        linear_layer_shapes(descriptor),
    )


def _party_thread_worker(session, upload, bundle, offline, private_seed, v_cache, out, p, hub):
    try:
        out[p] = run_gin(
            session, upload, bundle, offline, SeededPrf(private_seed), v_cache=v_cache
        )
    except Exception as exc:
        out[p] = exc
        hub.abort(repr(exc))


def run_inference_loopback(
    config: RunConfig,
    bundles: list,
    uploads: list,
    offlines: list,
    session_id: bytes,
    v_caches: list = None,
) -> tuple:
    hub = LoopbackHub(config.parties, timeout=config.timeout)
    sessions = hub.sessions(session_id)
    v_caches = v_caches or [{} for _ in range(config.parties)]
    seeds = _run_seeds(config)
    outputs = [None] * config.parties
    threads = []
    for p in range(config.parties):
        private = seeds["root"].derive_seed("party-private", p, session_id)
        t = threading.Thread(
            target=_party_thread_worker,
            args=(sessions[p], uploads[p], bundles[p], offlines[p], private, v_caches[p], outputs, p, hub),
        )
        t.start()
        threads.append(t)
    for t in threads:
        t.join()
    for p, value in enumerate(outputs):
        if isinstance(value, Exception):
            raise value
    return outputs, sessions


def infer_once(
    config: RunConfig,
    plain_model: PlainModel,
    graph: PlaintextGraph,
    request_index: int = 0,
    bundles: list = None,
    offlines: list = None,
    v_caches: list = None,
) -> InferenceOutcome:
    """One complete secure inference; reusable offline state may be passed
    in so repeated requests share pools and parameter-mask caches."""
    config.validate()
    timings = {}
    descriptor = plain_model.descriptor
    seeds = _run_seeds(config)
    session_id = seeds["root"].derive_seed("session", request_index)[:16]

    t0 = time.perf_counter()
    if bundles is None:
        bundles = split_model(plain_model, config.parties, seeds["model"])
    timings["model_split"] = (time.perf_counter() - t0) * 1000

    if descriptor.get("self_loops", True):
        graph = with_self_loops(graph)
    weighted = graph.weights is not None

    t0 = time.perf_counter()
    if offlines is None:
        offlines = prepare_offline(config, descriptor, graph.n_nodes, graph.n_edges, weighted)
    timings["offline"] = (time.perf_counter() - t0) * 1000

    t0 = time.perf_counter()
    client_seed = seeds["root"].derive_seed("client-request", request_index)
    uploads = assemble_upload(
        graph, descriptor, config.parties, config.n_batches, client_seed, session_id
    )
    timings["client_prep"] = (time.perf_counter() - t0) * 1000

    t0 = time.perf_counter()
    if config.backend == "loopback":
        outputs, sessions = run_inference_loopback(
            config, bundles, uploads, offlines, session_id, v_caches
        )
        transcripts = [s.transcript.summary() for s in sessions]
    else:
        outputs, transcripts = _run_inference_socket(config, bundles, uploads, offlines, session_id)
    timings["protocol"] = (time.perf_counter() - t0) * 1000

    t0 = time.perf_counter()
    result = reconstruct_result(outputs, config.fraction_bits)
    timings["reconstruct"] = (time.perf_counter() - t0) * 1000
    return InferenceOutcome(
        result=result,
        transcripts=transcripts,
        timings_ms=timings,
        session_id=session_id,
        logit_shares=outputs,
    )


def verify_against_reference(
    config: RunConfig, plain_model: PlainModel, graph: PlaintextGraph, request_index: int = 0
) -> dict:
    outcome = infer_once(config, plain_model, graph, request_index)
    ref_graph = with_self_loops(graph) if plain_model.descriptor.get("self_loops", True) else graph
    expected = run_reference(
        plain_model.descriptor,
        plain_model.params,
        ref_graph.features,
        ref_graph.src,
        ref_graph.dst,
        ref_graph.weights,
    )
    got = np.asarray(outcome.result["logits"], dtype=np.float64)
    max_abs = float(np.max(np.abs(got - expected))) if got.size else 0.0
    return {
        "outcome": outcome,
        "expected_logits": expected,
        "max_abs_diff": max_abs,
        "argmax_match": bool(
            np.array_equal(np.argmax(got, axis=-1), np.argmax(expected, axis=-1))
        ),
    }


def _ports_for(config: RunConfig, count: int):
    if config.base_port:
        return [config.base_port + i for i in range(count)]
    import socket as s

    socks = []
    ports = []
    for _ in range(count):
        sk = s.socket()
        sk.bind((config.host, 0))
        socks.append(sk)
        ports.append(sk.getsockname()[1])
    for sk in socks:
        sk.close()
    return ports


def _run_inference_socket(config, bundles, uploads, offlines, session_id):
    """Spawn one party process per share-holder and collect result files."""
    ports = _ports_for(config, config.parties)
    addresses = ",".join(f"{config.host}:{p}" for p in ports)
    with tempfile.TemporaryDirectory(prefix="cryptgnn-run-") as tmp:
        procs = []
        for p in range(config.parties):
            model_path = os.path.join(tmp, f"model_{p}.bin")
            bundle_path = os.path.join(tmp, f"upload_{p}.bin")
            pool_path = os.path.join(tmp, f"pools_{p}.bin")
            out_path = os.path.join(tmp, f"result_{p}")
            save_model_bundle(model_path, bundles[p])
            save_upload(bundle_path, uploads[p])
            save_party_offline(pool_path, offlines[p])
            private = _run_seeds(config)["root"].derive_seed("party-private", p, session_id)
            cmd = [
                sys.executable,
                "-m",
                "cryptgnn.cli",
                "party",
                "--index",
                str(p),
                "--addresses",
                addresses,
                "--session-id",
                session_id.hex(),
                "--model",
                model_path,
                "--bundle",
                bundle_path,
                "--pools",
                pool_path,
                "--private-seed",
                private.hex(),
                "--out",
                out_path,
                "--timeout",
                str(config.timeout),
            ]
            procs.append(subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.PIPE))
        outputs = [None] * config.parties
        transcripts = [None] * config.parties
        for p, proc in enumerate(procs):
            stdout, stderr = proc.communicate(timeout=config.timeout + 60)
            if proc.returncode != 0:
                raise ProtocolAbort(
                    f"party {p} exited with {proc.returncode}: {stderr.decode(errors='replace')[-2000:]}"
                )
        for p in range(config.parties):
            out_path = os.path.join(tmp, f"result_{p}")
            outputs[p] = np.load(out_path + ".npy")
            with open(out_path + ".json", "r", encoding="utf-8") as fh:
                transcripts[p] = json.load(fh)
    return outputs, transcripts


def party_process_main(
    index: int,
    addresses: list,
    session_id: bytes,
    model_path: str,
    bundle_path: str,
    pool_path: str,
    private_seed: bytes,
    out_path: str,
    timeout: float,
) -> int:
    """Entry point for a socket-backend party process."""
    ring = RingConfig(len(addresses), index, tuple(addresses))
    bundle = load_model_bundle(model_path)
    upload = load_upload(bundle_path)
    offline = load_party_offline(pool_path)
    session = SocketSession(ring, session_id, timeout=timeout)
    try:
        logits = run_gin(session, upload, bundle, offline, SeededPrf(private_seed))
    finally:
        session.close()
    np.save(out_path + ".npy", logits)
    with open(out_path + ".json", "w", encoding="utf-8") as fh:
        json.dump(session.transcript.summary(), fh)
    save_party_offline(pool_path, offline)  # persist advanced cursors
    return 0


def run_single_mpl(config: RunConfig, graph: PlaintextGraph, capture_first_hop: bool = False):
    """One message-passing layer over loopback, for benchmarks and the
    accounting checks; returns (outputs, sessions, uploads, timings)."""
    config.validate()
    descriptor = {
        "fraction_bits": config.fraction_bits,
        "input_dim": graph.n_feats,
        "classes": graph.n_feats,
        "readout": "none",
        "blocks": [{"layers": []}],
        "head": {"layers": []},
        "self_loops": False,
    }
    seeds = _run_seeds(config)
    session_id = seeds["root"].derive_seed("session", 0)[:16]
    t0 = time.perf_counter()
    uploads = assemble_upload(
        graph, descriptor, config.parties, config.n_batches,
        seeds["root"].derive_seed("client-request", 0), session_id,
    )
    client_ms = (time.perf_counter() - t0) * 1000

    hub = LoopbackHub(config.parties, timeout=config.timeout)
    sessions = hub.sessions(session_id)
    outputs = [None] * config.parties
    captured = []

    def worker(p):
        try:
            session = sessions[p]
            if capture_first_hop and p == 0:
                original = session.send

                def spy(peer, tag, payload):
                    if not captured:
                        captured.append(payload)
                    original(peer, tag, payload)

                session.send = spy
            up = uploads[p]
            outputs[p] = batch_crypt_mpl(
                session,
                SeededPrf(up.seed),
                0,
                up.x_share,
                up.edges,
                up.noise_effect_shares[0],
            )
        except Exception as exc:
            outputs[p] = exc
            hub.abort(repr(exc))

    t0 = time.perf_counter()
    threads = [threading.Thread(target=worker, args=(p,)) for p in range(config.parties)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    protocol_ms = (time.perf_counter() - t0) * 1000
    for value in outputs:
        if isinstance(value, Exception):
            raise value
    timings = {"client_prep": client_ms, "protocol": protocol_ms}
    return outputs, sessions, uploads, timings, captured


def mpl_cost_model_bits(n_nodes: int, n_feats: int, n_edges: int, n_batches: int, parties: int) -> int:
    """Analytic per-party traffic model for one layer: (N*K*R + M)*P*L bits."""
    return (n_nodes * n_feats * n_batches + n_edges) * parties * 64
