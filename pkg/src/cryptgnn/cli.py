"""Command line: model splitting, offline preprocessing, secure inference,
oracle verification, benchmarks, and metrics reports.

All subcommands honor CRYPTGNN_-prefixed environment variables for their
flags (e.g. CRYPTGNN_INFER_PARTIES=5). Exit codes: 0 success, 2 config
error, 3 protocol abort, 4 verification failure.
"""

import csv
import hashlib
import json
import os
import sys
import time

import click
import numpy as np

from . import KERNEL_BACKEND
from .client import load_graph, random_graph, save_graph
from .layers import offline_requirements
from .model import (
    gin_descriptor,
    load_plain_model,
    random_plain_model,
    save_model_bundle,
    save_plain_model,
    split_model,
)
from .orchestrator import (
    ConfigError,
    RunConfig,
    infer_once,
    party_process_main,
    prepare_offline,
    run_single_mpl,
    mpl_cost_model_bits,
    verify_against_reference,
)
from .provider import save_party_offline
from .transport import ProtocolAbort

EXIT_CONFIG = 2
EXIT_PROTOCOL = 3
EXIT_VERIFY = 4


def _seed_bytes(seed: str) -> bytes:
    try:
        raw = bytes.fromhex(seed)
        if len(raw) == 32:
            return raw
    except ValueError:
        pass
    return hashlib.blake2b(seed.encode("utf-8"), digest_size=32).digest()


def _config(parties, batches, fraction_bits, backend, seed, **kw) -> RunConfig:
    cfg = RunConfig(
        parties=parties,
        n_batches=batches,
        fraction_bits=fraction_bits,
        backend=backend,
        seed=_seed_bytes(seed),
        **kw,
    )
    try:
        cfg.validate()
    except ConfigError as exc:
        raise click.UsageError(str(exc))
    return cfg


def common_options(fn):
    fn = click.option("--parties", default=3, show_default=True, help="number of computing parties")(fn)
    fn = click.option("--batches", default=20, show_default=True, help="edge batches per layer")(fn)
    fn = click.option("--fraction-bits", default=16, show_default=True)(fn)
    fn = click.option("--backend", default="loopback", type=click.Choice(["loopback", "socket"]), show_default=True)(fn)
    fn = click.option("--seed", default="0", show_default=True, help="master seed (hex or passphrase)")(fn)
    return fn


@click.group(context_settings={"auto_envvar_prefix": "CRYPTGNN"})
def main():
    """Secure multi-party GNN inference over secret-shared graphs."""


@main.command("split-model")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--parties", default=3, show_default=True)
@click.option("--seed", default="0", show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_split_model(model_path, parties, seed, out_dir):
    """Split a plaintext model into one share file per party."""
    try:
        plain = load_plain_model(model_path)
        bundles = split_model(plain, parties, _seed_bytes(seed))
    except (ValueError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    os.makedirs(out_dir, exist_ok=True)
    for bundle in bundles:
        path = os.path.join(out_dir, f"model_p{bundle.party}.bin")
        save_model_bundle(path, bundle)
        click.echo(f"wrote {path}")


@main.command("offline")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--parties", default=3, show_default=True)
@click.option("--client-id", default="client-0", show_default=True)
@click.option("--nodes", default=None, type=int, help="size pools for this node count (default: n-max)")
@click.option("--edges", default=0, type=int, help="edge count for weighted-graph sizing")
@click.option("--weighted", is_flag=True)
@click.option("--requests", default=1, show_default=True, help="inference requests to provision")
@click.option("--n-max", default=4096, show_default=True)
@click.option("--fraction-bits", default=16, show_default=True)
@click.option("--seed", default="0", show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_offline(model_path, parties, client_id, nodes, edges, weighted, requests, n_max, fraction_bits, seed, out_dir):
    """Generate per-party correlated-randomness pool files for one client."""
    try:
        plain = load_plain_model(model_path)
        cfg = RunConfig(
            parties=parties,
            fraction_bits=fraction_bits,
            n_max=n_max,
            seed=_seed_bytes(seed),
            client_id=client_id,
            pool_requests=requests,
        )
        cfg.validate()
        sizing_nodes = nodes if nodes is not None else n_max
        offlines = prepare_offline(cfg, plain.descriptor, sizing_nodes, edges, weighted)
    except (ValueError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    os.makedirs(out_dir, exist_ok=True)
    need = offline_requirements(plain.descriptor, sizing_nodes, edges, weighted)
    click.echo(
        f"pools per request: {need['am_pairs']} pairs "
        f"({need['am_pairs'] // 3} elementwise products), "
        f"{need['trunc_pairs']} truncations, {need['cmp_bundles']} comparisons"
    )
    for off in offlines:
        path = os.path.join(out_dir, f"pools_p{off.party}.bin")
        save_party_offline(path, off)
        click.echo(f"wrote {path}")


def _print_outcome(outcome, fraction_bits):
    argmax = np.asarray(outcome.result["argmax"]).ravel()
    click.echo(f"predicted class: {argmax.tolist()}")
    for name, ms in outcome.timings_ms.items():
        click.echo(f"  {name:>12}: {ms:9.1f} ms")
    for p, tr in enumerate(outcome.transcripts):
        click.echo(
            f"  party {p}: rounds={tr['rounds']} sent={tr['bytes_sent']}B "
            f"recv={tr['bytes_received']}B digest={tr['sent_digest'][:16]}"
        )


@main.command("infer")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--graph", "graph_path", required=True, type=click.Path(exists=True))
@common_options
@click.option("--requests", default=1, show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path(), help="write metrics JSON here")
def cmd_infer(model_path, graph_path, parties, batches, fraction_bits, backend, seed, requests, out_path):
    """Run end-to-end secure inference across P parties."""
    cfg = _config(parties, batches, fraction_bits, backend, seed, pool_requests=requests)
    try:
        plain = load_plain_model(model_path)
        graph = load_graph(graph_path)
    except (ValueError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        outcome = infer_once(cfg, plain, graph)
    except ProtocolAbort as exc:
        click.echo(f"protocol abort: {exc}", err=True)
        sys.exit(EXIT_PROTOCOL)
    _print_outcome(outcome, fraction_bits)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            json.dump(outcome.metrics(), fh, indent=2)
        click.echo(f"wrote {out_path}")


@main.command("verify")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--graph", "graph_path", required=True, type=click.Path(exists=True))
@common_options
@click.option("--tolerance", default=1e-3, show_default=True)
def cmd_verify(model_path, graph_path, parties, batches, fraction_bits, backend, seed, tolerance):
    """Compare secure inference against the plaintext reference engine."""
    cfg = _config(parties, batches, fraction_bits, backend, seed)
    try:
        plain = load_plain_model(model_path)
        graph = load_graph(graph_path)
    except (ValueError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        report = verify_against_reference(cfg, plain, graph)
    except ProtocolAbort as exc:
        click.echo(f"protocol abort: {exc}", err=True)
        sys.exit(EXIT_PROTOCOL)
    click.echo(f"max abs logit difference: {report['max_abs_diff']:.3e}")
    click.echo(f"argmax agreement: {report['argmax_match']}")
    if report["max_abs_diff"] > tolerance:
        click.echo(f"verification FAILED (tolerance {tolerance})", err=True)
        sys.exit(EXIT_VERIFY)
    click.echo("verification passed")


@main.command("bench")
@click.option("--mode", default="mpl", type=click.Choice(["mpl", "kernels"]), show_default=True)
@click.option("--nodes", default="200,500,2000", show_default=True, help="comma list of N")
@click.option("--feats", default=8, show_default=True)
@click.option("--degrees", default="2,5", show_default=True, help="comma list of average degrees")
@click.option("--parties-list", default="3", show_default=True)
@click.option("--batches-list", default="20", show_default=True, help="comma list; 0 means one batch per edge")
@click.option("--seed", default="0", show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_bench(mode, nodes, feats, degrees, parties_list, batches_list, seed, out_path):
    """Sweep synthetic workloads and emit one CSV row per run."""
    rows = []
    if mode == "kernels":
        rows = _bench_kernels(_seed_bytes(seed))
    else:
        for n in (int(v) for v in nodes.split(",")):
            for d_avg in (int(v) for v in degrees.split(",")):
                for parties in (int(v) for v in parties_list.split(",")):
                    for batches in (int(v) for v in batches_list.split(",")):
                        m = n * d_avg
                        r = m if batches == 0 else batches
                        graph = random_graph(_seed_bytes(f"{seed}-{n}-{d_avg}"), n, feats, m)
                        cfg = RunConfig(parties=parties, n_batches=r, seed=_seed_bytes(seed))
                        outputs, sessions, uploads, timings, _ = run_single_mpl(cfg, graph)
                        tr = sessions[0].transcript
                        r_eff = uploads[0].edges.n_batches
                        model_bits = mpl_cost_model_bits(n, feats, m, r_eff, parties)
                        measured = tr.total_bytes_sent
                        rows.append(
                            {
                                "mode": "mpl",
                                "n": n,
                                "k": feats,
                                "m": m,
                                "d_avg": d_avg,
                                "parties": parties,
                                "batches": r_eff,
                                "kernel": KERNEL_BACKEND,
                                "wall_ms_client": round(timings["client_prep"], 2),
                                "wall_ms_protocol": round(timings["protocol"], 2),
                                "rounds_per_party": tr.rounds_used,
                                "bytes_per_party": measured,
                                "cost_model_bytes": model_bits // 8,
                                "deviation_pct": round(
                                    100.0 * (measured - model_bits / 8) / (model_bits / 8), 2
                                ),
                            }
                        )
                        click.echo(
                            f"mpl n={n} d={d_avg} P={parties} R={r_eff}: "
                            f"{timings['protocol']:.0f} ms, {measured} B/party"
                        )
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    click.echo(f"wrote {out_path} ({len(rows)} rows)")


def _bench_kernels(seed: bytes):
    """Compare the compiled kernel extension against the numpy fallback."""
    from .kernels import numpy_impl
    from .prf import SeededPrf

    impls = [("numpy", numpy_impl)]
    try:
        from .kernels import _core

        impls.append(("compiled", _core))
    except ImportError:
        click.echo("compiled kernels unavailable; benchmarking fallback only", err=True)
    prf = SeededPrf(seed, ("kernel-bench",))
    rows = []
    for name, impl in impls:
        for size in (10_000, 1_000_000):
            a = prf.field_matrix(size, "a").ravel()
            b = prf.field_matrix(size, "b").ravel()
            t0 = time.perf_counter()
            impl.mul_mod_flat(np.ascontiguousarray(a), np.ascontiguousarray(b))
            rows.append(
                {"mode": "kernels", "op": "mul_mod", "size": size, "kernel": name,
                 "wall_ms": round((time.perf_counter() - t0) * 1000, 3)}
            )
        for dims in ((128, 16, 16), (512, 64, 64)):
            n, k, k2 = dims
            a = np.ascontiguousarray(prf.field_matrix((n, k), "ma"))
            b = np.ascontiguousarray(prf.field_matrix((k, k2), "mb"))
            t0 = time.perf_counter()
            impl.matmul_mod(a, b)
            rows.append(
                {"mode": "kernels", "op": f"matmul_{n}x{k}x{k2}", "size": n * k2, "kernel": name,
                 "wall_ms": round((time.perf_counter() - t0) * 1000, 3)}
            )
        stack = np.ascontiguousarray(prf.field_matrix((40, 500, 8), "st"))
        noise = np.ascontiguousarray(prf.field_matrix((40, 500, 8), "no"))
        shifts = np.ascontiguousarray(prf.integers(40, 500, "sh"))
        t0 = time.perf_counter()
        impl.add_rotate_stack(stack, noise, shifts)
        rows.append(
            {"mode": "kernels", "op": "add_rotate_stack", "size": stack.size, "kernel": name,
             "wall_ms": round((time.perf_counter() - t0) * 1000, 3)}
        )
    for row in rows:
        click.echo(f"{row['kernel']:>9} {row['op']:<20} {row['wall_ms']:>10} ms")
    return rows


@main.command("report")
@click.option("--metrics", "metrics_path", required=True, type=click.Path(exists=True))
def cmd_report(metrics_path):
    """Summarize an infer run's metrics file and reconcile phase totals."""
    with open(metrics_path, "r", encoding="utf-8") as fh:
        metrics = json.load(fh)
    click.echo(f"session {metrics['session_id']}: class {metrics['argmax']}")
    click.echo("timings:")
    for name, ms in metrics["timings_ms"].items():
        click.echo(f"  {name:>12}: {ms:9.1f} ms")
    click.echo("per-party transport:")
    ok = True
    for p, tr in enumerate(metrics["transcripts"]):
        phase_bytes = sum(ph["bytes_sent"] for ph in tr["phases"].values())
        phase_rounds = sum(ph["rounds"] for ph in tr["phases"].values())
        reconciled = phase_bytes == tr["bytes_sent"] and phase_rounds == tr["rounds"]
        ok &= reconciled
        phase_text = ", ".join(
            "{}: {}B/{}r".format(k, v["bytes_sent"], v["rounds"]) for k, v in tr["phases"].items()
        )
        click.echo(
            f"  party {p}: rounds={tr['rounds']} sent={tr['bytes_sent']}B "
            f"phases={{{phase_text}}} reconciled={reconciled}"
        )
    if not ok:
        click.echo("phase totals do not reconcile with transcript totals", err=True)
        sys.exit(EXIT_VERIFY)


@main.command("party")
@click.option("--index", required=True, type=int)
@click.option("--addresses", required=True, help="comma list host:port, ring order")
@click.option("--session-id", required=True)
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--bundle", "bundle_path", required=True, type=click.Path(exists=True))
@click.option("--pools", "pool_path", required=True, type=click.Path(exists=True))
@click.option("--private-seed", required=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--timeout", default=30.0, show_default=True)
def cmd_party(index, addresses, session_id, model_path, bundle_path, pool_path, private_seed, out_path, timeout):
    """Run one computing party over the socket backend (used by infer)."""
    addr_list = []
    for part in addresses.split(","):
        host, port = part.rsplit(":", 1)
        addr_list.append((host, int(port)))
    try:
        code = party_process_main(
            index,
            addr_list,
            bytes.fromhex(session_id),
            model_path,
            bundle_path,
            pool_path,
            bytes.fromhex(private_seed),
            out_path,
            timeout,
        )
    except ProtocolAbort as exc:
        click.echo(f"protocol abort: {exc}", err=True)
        sys.exit(EXIT_PROTOCOL)
    sys.exit(code)


@main.command("gen-graph")
@click.option("--nodes", default=50, show_default=True)
@click.option("--feats", default=8, show_default=True)
@click.option("--edges", default=150, show_default=True)
@click.option("--weighted", is_flag=True)
@click.option("--seed", default="0", show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_gen_graph(nodes, feats, edges, weighted, seed, out_path):
    """Write a synthetic random graph file."""
    graph = random_graph(_seed_bytes(seed), nodes, feats, edges, weighted=weighted)
    save_graph(out_path, graph)
    click.echo(f"wrote {out_path} (N={nodes} K={feats} M={edges})")


@main.command("gen-model")
@click.option("--input-dim", default=8, show_default=True)
@click.option("--hidden-dim", default=16, show_default=True)
@click.option("--classes", default=4, show_default=True)
@click.option("--blocks", default=3, show_default=True)
@click.option("--fraction-bits", default=16, show_default=True)
@click.option("--activation", default="relu", type=click.Choice(["relu", "sigmoid"]), show_default=True)
@click.option("--seed", default="0", show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_gen_model(input_dim, hidden_dim, classes, blocks, fraction_bits, activation, seed, out_path):
    """Write a randomly initialized stacked message-passing model."""
    descriptor = gin_descriptor(
        input_dim, hidden_dim, classes, fraction_bits=fraction_bits,
        blocks=blocks, activation=activation,
    )
    descriptor["self_loops"] = True
    plain = random_plain_model(descriptor, _seed_bytes(seed))
    save_plain_model(out_path, plain)
    click.echo(f"wrote {out_path}")


if __name__ == "__main__":
    main()
