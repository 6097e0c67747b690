"""Command line interface: one binary for generation, local and distributed
correction, the store daemon, key sealing, credential issuance, benchmarks,
and output verification.

Exit codes: 0 success, 1 verification or run failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .cluster import ClusterError, RunConfig, run_primary, run_worker
from .layout import LayoutError, fragment, gen_random, parse_layout, write_layout
from .litho import FieldProbe, OpticalModel, decompose, threshold_crossings
from .opc import OpcParams, run_correction
from .secure_store import (
    StoreDaemon,
    StoreError,
    StoreMode,
    seal_key,
    store_client,
    write_sealed_key,
)
from .tiler import TileResult, plan_tiles, stitch
from .transport import SecurityMode, gen_workload_credentials, load_credential, parse_address


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


def _non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {value}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sigma", type=_positive_float, default=20.0,
                   help="Gaussian blur width in grid units")
    p.add_argument("--threshold", type=float, default=0.5, help="print threshold in (0,1)")
    p.add_argument("--frag-len", type=_positive_int, default=48,
                   help="maximum fragment length in grid units")


def _add_opc_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--max-iter", type=_non_negative_int, default=20,
                   help="correction iteration cap")
    p.add_argument("--epe-tol", type=_positive_float, default=0.25,
                   help="convergence tolerance in grid units")
    p.add_argument("--gain", type=_positive_float, default=0.7, help="feedback gain in (0,1]")


def _model_from(args) -> OpticalModel:
    return OpticalModel(sigma=args.sigma, threshold=args.threshold)


def _params_from(args) -> OpcParams:
    return OpcParams(max_iter=args.max_iter, epe_tol=args.epe_tol, gain=args.gain)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="opcvault",
        description="Desk-scale confidential OPC: distributed correction with "
                    "encrypted storage and mutually authenticated worker channels.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def subparser(name: str, help_text: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, help=help_text,
                              formatter_class=argparse.ArgumentDefaultsHelpFormatter)

    p = subparser("gen", "generate a random test layout")
    p.add_argument("--seed", type=int, required=True, help="generator seed")
    p.add_argument("--n", type=_non_negative_int, required=True, help="polygon count")
    p.add_argument("--out", required=True, help="output layout file")

    p = subparser("run-local", "correct a layout in this process")
    p.add_argument("--in", dest="input", required=True, help="target layout file")
    p.add_argument("--out", required=True, help="corrected output file")
    p.add_argument("--tile-size", type=_non_negative_int, default=0,
                   help="tile edge in grid units; 0 means a single tile")
    p.add_argument("--workers", type=_positive_int, default=1, help="corrector threads")
    _add_model_flags(p)
    _add_opc_flags(p)

    p = subparser("run-primary", "serve a distributed correction run")
    p.add_argument("--in", dest="input", default="input.lay", help="input object name")
    p.add_argument("--out", default="output.lay", help="output object name")
    p.add_argument("--listen", default="127.0.0.1:0", help="listen address host:port")
    p.add_argument("--workers", type=_positive_int, default=1, help="expected worker count")
    p.add_argument("--tile-size", type=_non_negative_int, default=0,
                   help="tile edge in grid units; 0 means a single tile")
    p.add_argument("--security", choices=[m.value for m in SecurityMode], default="plain")
    p.add_argument("--store", choices=[m.value for m in StoreMode], default="passthrough")
    p.add_argument("--store-addr", default=None, help="store daemon address for sidecar modes")
    p.add_argument("--root", default=None, help="store root for passthrough mode")
    p.add_argument("--creds", default=None, help="credential bundle directory")
    _add_model_flags(p)
    _add_opc_flags(p)

    p = subparser("run-worker", "pull and correct tiles from a primary")
    p.add_argument("--primary", required=True, help="primary address host:port")
    p.add_argument("--security", choices=[m.value for m in SecurityMode], default="plain")
    p.add_argument("--creds", default=None, help="credential bundle directory")

    p = subparser("store", "store daemon and object operations")
    p.add_argument("action", choices=["serve", "put", "get", "ls"])
    p.add_argument("name", nargs="?", default=None, help="object name for put/get")
    p.add_argument("--root", default=None, help="store root directory (serve)")
    p.add_argument("--store", choices=["sidecar", "sidecar-enc"], default="sidecar",
                   help="daemon mode (serve)")
    p.add_argument("--store-addr", default="127.0.0.1:0", help="daemon address")
    p.add_argument("--measurement", default=None, help="measurement to unseal the key (serve)")
    p.add_argument("--in", dest="input", default=None, help="file to upload (put)")
    p.add_argument("--out", default=None, help="file to write (get)")

    p = subparser("seal", "create and seal a store master key")
    p.add_argument("--root", required=True, help="store root directory")
    p.add_argument("--measurement", required=True, help="measurement string to bind")

    p = subparser("creds", "issue workload credentials")
    p.add_argument("workload_id", help="workload identity the bundle names")
    p.add_argument("--out", required=True, help="bundle output directory")
    p.add_argument("--n", type=_non_negative_int, default=2, help="member identity count")

    p = subparser("bench", "run the security configuration ladder")
    p.add_argument("--in", dest="input", required=True, help="target layout file")
    p.add_argument("--workers", type=_positive_int, default=4, help="workers per run")
    p.add_argument("--repeats", type=_positive_int, default=5, help="repeats per config")
    p.add_argument("--tile-size", type=_positive_int, default=1125, help="tile edge in grid units")
    p.add_argument("--root", default=None, help="scratch directory for run stores")
    p.add_argument("--csv", default=None, help="summary CSV path (samples CSV alongside)")
    p.add_argument("--measurement", default="sev-snp-demo", help="sealing measurement")
    _add_model_flags(p)
    _add_opc_flags(p)

    p = subparser("verify", "compare layouts or audit placement error")
    p.add_argument("path_a", help="first layout (corrected layout with --epe)")
    p.add_argument("path_b", help="second layout (target layout with --epe)")
    p.add_argument("--epe", action="store_true",
                   help="re-measure max |EPE| of path_a against target path_b")
    _add_model_flags(p)

    return parser


def _cmd_gen(args) -> int:
    layout = gen_random(args.seed, args.n)
    Path(args.out).write_text(write_layout(layout), encoding="utf-8")
    print(f"wrote {args.out}: {args.n} polygons, seed {args.seed}")
    return 0


def _correct_distributed_inprocess(layout, tile_size, model, params, frag_len, workers):
    if tile_size <= 0:
        tile_size = max(layout.bbox[2] - layout.bbox[0], layout.bbox[3] - layout.bbox[1])
    plan = plan_tiles(layout, tile_size, model, params, frag_len)

    def correct(el):
        corrected, stats, fs = run_correction(el.halo_geom, model, params, frag_len)
        return TileResult(el.tile_id, corrected, stats, fs.offsets())

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(correct, plan.elements))
    else:
        results = [correct(el) for el in plan.elements]
    return stitch(plan, results), results


def _cmd_run_local(args) -> int:
    layout = parse_layout(Path(args.input).read_text(encoding="utf-8"))
    merged, results = _correct_distributed_inprocess(
        layout, args.tile_size, _model_from(args), _params_from(args),
        args.frag_len, args.workers,
    )
    text = write_layout(merged)
    Path(args.out).write_text(text, encoding="utf-8")
    worst = max((r.stats.final_max_epe for r in results if r.stats.iterations), default=0.0)
    all_converged = all(r.stats.converged for r in results)
    digest = hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
    print(f"corrected {len(results)} tile(s); converged={all_converged} "
          f"max|EPE|={worst:.4f}; sha256 {digest}")
    return 0 if all_converged else 1


def _cmd_run_primary(args) -> int:
    creds = load_credential(args.creds, 0) if args.creds else None
    config = RunConfig(
        input_name=args.input,
        output_name=args.out,
        listen=args.listen,
        expected_workers=args.workers,
        security=SecurityMode(args.security),
        credentials=creds,
        store_mode=StoreMode(args.store),
        store_root=Path(args.root) if args.root else None,
        store_addr=args.store_addr,
        tile_size=args.tile_size,
        frag_len=args.frag_len,
        model=_model_from(args),
        params=_params_from(args),
    )
    summary = run_primary(config)
    phases = " ".join(f"{k}={v:.2f}s" for k, v in summary.phase_seconds.items())
    print(f"run complete: {len(summary.tiles)} tiles, {summary.workers_observed} workers, "
          f"{summary.redispatches} redispatches, digest {summary.output_digest[:16]}")
    print(phases)
    return 0


def _cmd_run_worker(args) -> int:
    creds = load_credential(args.creds, 1) if args.creds else None
    summary = run_worker(args.primary, creds, SecurityMode(args.security))
    print(f"worker done: {summary.tiles_processed} tiles, "
          f"{summary.compute_seconds:.2f}s compute")
    return 0


def _cmd_store(args) -> int:
    if args.action == "serve":
        if args.root is None:
            print("store serve requires --root", file=sys.stderr)
            return 2
        mode = StoreMode.SIDECAR_ENCRYPTED if args.store == "sidecar-enc" else StoreMode.SIDECAR_PLAIN
        daemon = StoreDaemon(Path(args.root), mode, args.measurement,
                             parse_address(args.store_addr))
        print("serving %s store on %s:%d" % (args.store, *daemon.address), flush=True)
        try:
            daemon._thread.join()
        except KeyboardInterrupt:
            daemon.close()
        return 0

    client = store_client(parse_address(args.store_addr))
    if args.action == "ls":
        for name in client.list():
            print(name)
        return 0
    if args.name is None:
        print(f"store {args.action} requires an object name", file=sys.stderr)
        return 2
    if args.action == "put":
        if args.input is None:
            print("store put requires --in", file=sys.stderr)
            return 2
        client.put(args.name, Path(args.input).read_bytes())
        return 0
    data = client.get(args.name)
    if args.out:
        Path(args.out).write_bytes(data)
    else:
        sys.stdout.buffer.write(data)
    return 0


def _cmd_seal(args) -> int:
    master = os.urandom(32)
    path = write_sealed_key(Path(args.root), seal_key(master, args.measurement))
    print(f"sealed master key at {path} (measurement digest binds {args.measurement!r})")
    return 0


def _cmd_creds(args) -> int:
    out = gen_workload_credentials(args.workload_id, args.n, Path(args.out))
    print(f"issued anchor + {args.n} member identities for {args.workload_id!r} in {out}")
    return 0


def _cmd_bench(args) -> int:
    input_bytes = Path(args.input).read_bytes()
    workdir = Path(args.root) if args.root else Path.cwd() / "bench-work"
    workdir.mkdir(parents=True, exist_ok=True)
    plan = bench_mod.BenchPlan(
        input_bytes=input_bytes,
        workdir=workdir,
        workers=args.workers,
        repeats=args.repeats,
        tile_size=args.tile_size,
        frag_len=args.frag_len,
        model=_model_from(args),
        params=_params_from(args),
        measurement=args.measurement,
    )
    csv_path = Path(args.csv) if args.csv else workdir / "summary.csv"
    samples_path = csv_path.with_name(csv_path.stem + "-samples.csv")
    samples = bench_mod.run_matrix(plan, samples_csv_path=samples_path)
    report = bench_mod.normalize(samples, alt_baseline="storage_sidecar")
    csv_path.write_bytes(bench_mod.emit_report(report, "csv"))
    sys.stdout.write(bench_mod.emit_report(report, "text").decode("utf-8"))
    print(f"summary: {csv_path}\nsamples: {samples_path}")
    return 0


def _cmd_verify(args) -> int:
    a = parse_layout(Path(args.path_a).read_text(encoding="utf-8"))
    b = parse_layout(Path(args.path_b).read_text(encoding="utf-8"))
    if not args.epe:
        equal = write_layout(a) == write_layout(b)
        print("identical" if equal else "differ")
        return 0 if equal else 1

    # Re-measure the corrected geometry against the target's fragments.
    model = _model_from(args)
    target_fs = fragment(b, args.frag_len)
    if a.grid_nm == 0 or b.grid_nm % a.grid_nm != 0:
        print(f"grids incompatible: corrected {a.grid_nm}nm vs target {b.grid_nm}nm",
              file=sys.stderr)
        return 1
    scale = a.grid_nm / b.grid_nm
    rects = decompose(a, max_extent=int(128 / scale), unit_scale=scale)
    probe = FieldProbe(rects, model, target_fs.midpoints(), target_fs.normals())
    values, clamped = threshold_crossings(probe, model)
    max_epe = float(np.max(np.abs(values))) if values.size else 0.0
    print(f"max|EPE| = {max_epe:.6f} grid units over {values.size} fragments "
          f"({int(clamped.sum())} clamped)")
    return 0


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("OPCVAULT_LOG", "error").lower()
    logging.basicConfig(level={"error": logging.ERROR, "info": logging.INFO,
                               "debug": logging.DEBUG}.get(level, logging.ERROR))
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "gen": _cmd_gen,
        "run-local": _cmd_run_local,
        "run-primary": _cmd_run_primary,
        "run-worker": _cmd_run_worker,
        "store": _cmd_store,
        "seal": _cmd_seal,
        "creds": _cmd_creds,
        "bench": _cmd_bench,
        "verify": _cmd_verify,
    }
    try:
        return handlers[args.command](args)
    except (LayoutError, StoreError, ClusterError, bench_mod.BenchError,
            ConnectionError, FileNotFoundError, FileExistsError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
