"""Benchmark ladder: run the security configuration matrix and normalize
overheads against the baseline.

Four configurations are runnable on plain hardware (baseline, storage
sidecar, encrypted storage sidecar, end-to-end with mutual channels); the
two virtualization rows are carried as N/A because they require VM/TEE
hardware. Repeats interleave round-robin over configurations to decorrelate
drift, and every run's merged-output digest must match the first sample:
the security layers must not change results.
"""

from __future__ import annotations

import csv
import io
import os
import statistics
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from .cluster import ClusterError, RunConfig, RunSummary, start_primary
from .litho import OpticalModel
from .opc import OpcParams
from .secure_store import LocalStore, SealedKey, StoreDaemon, StoreMode, seal_key, write_sealed_key
from .transport import SecurityMode, gen_workload_credentials, load_credential

PHASES = ("read", "partition", "correct", "stitch", "write")


class BenchError(RuntimeError):
    """Benchmark contract violation, including digest mismatches."""


@dataclass(frozen=True)
class BenchConfig:
    """One row of the configuration ladder."""

    name: str
    store_mode: StoreMode | None
    security_mode: SecurityMode | None
    runnable: bool
    note: str = ""


LADDER: tuple[BenchConfig, ...] = (
    BenchConfig("baseline", StoreMode.PASSTHROUGH, SecurityMode.PLAIN, True),
    BenchConfig("storage_sidecar", StoreMode.SIDECAR_PLAIN, SecurityMode.PLAIN, True),
    BenchConfig("storage_encrypted", StoreMode.SIDECAR_ENCRYPTED, SecurityMode.PLAIN, True),
    BenchConfig("end_to_end", StoreMode.SIDECAR_ENCRYPTED, SecurityMode.MUTUAL, True),
    BenchConfig("kata_vm", None, None, False, "requires VM/TEE hardware"),
    BenchConfig("coco_vm", None, None, False, "requires VM/TEE hardware"),
)

_BY_NAME = {c.name: c for c in LADDER}


def ladder_config(name: str) -> BenchConfig:
    try:
        return _BY_NAME[name]
    except KeyError:
        raise BenchError(f"unknown configuration {name!r}") from None


@dataclass(frozen=True)
class RunSample:
    config: str
    run: int
    wall_seconds: float
    phase_seconds: dict[str, float]
    output_digest: str


@dataclass(frozen=True)
class ConfigRow:
    config: str
    runnable: bool
    mean_s: float | None
    stdev_s: float | None
    overhead_pct: float | None
    alt_overhead_pct: float | None
    status: str


@dataclass(frozen=True)
class OverheadReport:
    rows: tuple[ConfigRow, ...]
    baseline: str
    alt_baseline: str | None


def normalize(samples: list[RunSample], baseline: str = "baseline",
              alt_baseline: str | None = None) -> OverheadReport:
    """Per-config mean/stdev and overhead percentages vs the baseline.

    overhead_pct = (mean / mean_baseline - 1) * 100, the paper's
    normalization. A config faster than baseline by more than two baseline
    standard deviations is flagged, not failed: desk-scale noise makes hard
    ordering assertions wrong.
    """
    by_config: dict[str, list[float]] = {}
    for s in samples:
        by_config.setdefault(s.config, []).append(s.wall_seconds)
    if baseline not in by_config:
        raise BenchError(f"no samples for baseline config {baseline!r}")

    means = {c: statistics.fmean(v) for c, v in by_config.items()}
    stdevs = {c: (statistics.stdev(v) if len(v) > 1 else 0.0) for c, v in by_config.items()}
    base_mean = means[baseline]
    base_stdev = stdevs[baseline]
    alt_mean = means.get(alt_baseline) if alt_baseline else None

    rows = []
    for cfg in LADDER:
        if cfg.name not in by_config:
            if not cfg.runnable:
                rows.append(ConfigRow(cfg.name, False, None, None, None, None, "n/a"))
            continue
        mean = means[cfg.name]
        overhead = (mean / base_mean - 1.0) * 100.0
        alt = (mean / alt_mean - 1.0) * 100.0 if alt_mean else None
        status = "ok"
        if cfg.name != baseline and mean < base_mean - 2.0 * base_stdev:
            status = "faster-than-baseline"
        rows.append(ConfigRow(cfg.name, True, mean, stdevs[cfg.name], overhead, alt, status))
    for name in sorted(by_config):
        if name not in _BY_NAME:
            raise BenchError(f"sample for unknown configuration {name!r}")
    return OverheadReport(tuple(rows), baseline, alt_baseline)


def emit_samples_csv(samples: list[RunSample]) -> bytes:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["config", "run", "wall_seconds", "phase", "phase_seconds"])
    for s in samples:
        for phase in PHASES:
            w.writerow([s.config, s.run, repr(s.wall_seconds), phase,
                        repr(s.phase_seconds.get(phase, 0.0))])
    return out.getvalue().encode("utf-8")


def emit_report(report: OverheadReport, fmt: str = "csv") -> bytes:
    """Summary as CSV (full-precision floats) or a readable text table."""
    if fmt == "csv":
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["config", "mean_s", "stdev_s", "overhead_pct", "alt_overhead_pct", "status"])
        for r in report.rows:
            w.writerow([
                r.config,
                "" if r.mean_s is None else repr(r.mean_s),
                "" if r.stdev_s is None else repr(r.stdev_s),
                "" if r.overhead_pct is None else repr(r.overhead_pct),
                "" if r.alt_overhead_pct is None else repr(r.alt_overhead_pct),
                r.status,
            ])
        return out.getvalue().encode("utf-8")
    if fmt == "text":
        lines = [f"{'config':<20} {'mean_s':>10} {'stdev_s':>9} {'overhead':>9} {'alt':>9}  status"]
        for r in report.rows:
            if not r.runnable:
                lines.append(f"{r.config:<20} {'N/A':>10} {'N/A':>9} {'N/A':>9} {'N/A':>9}  "
                             f"{_BY_NAME[r.config].note}")
                continue
            alt = f"{r.alt_overhead_pct:+.2f}%" if r.alt_overhead_pct is not None else "-"
            lines.append(
                f"{r.config:<20} {r.mean_s:>10.3f} {r.stdev_s:>9.3f} "
                f"{r.overhead_pct:>+8.2f}% {alt:>9}  {r.status}"
            )
        lines.append(f"(overheads normalized to {report.baseline})")
        return ("\n".join(lines) + "\n").encode("utf-8")
    raise BenchError(f"unknown report format {fmt!r}")


def parse_summary_csv(data: bytes) -> dict[str, dict[str, float | None]]:
    rows = {}
    reader = csv.DictReader(io.StringIO(data.decode("utf-8")))
    for row in reader:
        rows[row["config"]] = {
            k: (float(row[k]) if row[k] else None)
            for k in ("mean_s", "stdev_s", "overhead_pct", "alt_overhead_pct")
        }
    return rows


def launch_worker_process(primary_addr: str, security: SecurityMode,
                          creds_dir: Path | None = None) -> subprocess.Popen:
    """Start one worker as a subprocess of the installed CLI."""
    cmd = [sys.executable, "-m", "opcvault", "run-worker",
           "--primary", primary_addr, "--security", security.value]
    if creds_dir is not None:
        cmd += ["--creds", str(creds_dir)]
    return subprocess.Popen(cmd, stdout=subprocess.DEVNULL, stderr=subprocess.PIPE)


@dataclass
class BenchPlan:
    """Inputs for one matrix execution."""

    input_bytes: bytes
    workdir: Path
    workers: int = 4
    repeats: int = 5
    tile_size: int = 1125
    frag_len: int = 48
    model: OpticalModel = None
    params: OpcParams = None
    configs: tuple[str, ...] = tuple(c.name for c in LADDER)
    measurement: str = "sev-snp-demo"
    workload_id: str = "opcvault-bench"

    def __post_init__(self):
        if self.repeats < 1:
            raise BenchError("repeats must be at least 1")
        if self.model is None:
            self.model = OpticalModel()
        if self.params is None:
            self.params = OpcParams()
        for name in self.configs:
            ladder_config(name)


def _execute_one(plan: BenchPlan, cfg: BenchConfig, run_idx: int,
                 creds_dir: Path) -> RunSample:
    root = plan.workdir / f"{cfg.name}-run{run_idx}"
    root.mkdir(parents=True)
    daemon: StoreDaemon | None = None
    master = os.urandom(32)
    if cfg.store_mode is StoreMode.SIDECAR_ENCRYPTED:
        write_sealed_key(root, seal_key(master, plan.measurement))
        LocalStore(root, master).put("input.lay", plan.input_bytes)
    else:
        LocalStore(root).put("input.lay", plan.input_bytes)

    store_addr = None
    if cfg.store_mode is not StoreMode.PASSTHROUGH:
        daemon = StoreDaemon(root, cfg.store_mode, plan.measurement)
        store_addr = "%s:%d" % daemon.address

    credentials = None
    if cfg.security_mode is SecurityMode.MUTUAL:
        credentials = load_credential(creds_dir, 0)

    config = RunConfig(
        input_name="input.lay",
        output_name="output.lay",
        listen="127.0.0.1:0",
        expected_workers=plan.workers,
        security=cfg.security_mode,
        credentials=credentials,
        store_mode=cfg.store_mode,
        store_root=root if cfg.store_mode is StoreMode.PASSTHROUGH else None,
        store_addr=store_addr,
        tile_size=plan.tile_size,
        frag_len=plan.frag_len,
        model=plan.model,
        params=plan.params,
    )

    workers: list[subprocess.Popen] = []
    try:
        handle = start_primary(config)
        for _ in range(plan.workers):
            workers.append(
                launch_worker_process(
                    handle.address, cfg.security_mode,
                    creds_dir if cfg.security_mode is SecurityMode.MUTUAL else None,
                )
            )
        summary: RunSummary = handle.result()
    finally:
        for w in workers:
            try:
                w.wait(timeout=30)
            except subprocess.TimeoutExpired:
                w.kill()
                w.wait()
        if daemon is not None:
            daemon.close()

    for w in workers:
        if w.returncode != 0:
            stderr = w.stderr.read().decode("utf-8", errors="replace") if w.stderr else ""
            raise BenchError(f"worker exited {w.returncode} during {cfg.name}: {stderr.strip()}")

    return RunSample(cfg.name, run_idx, summary.wall_seconds,
                     dict(summary.phase_seconds), summary.output_digest)


def run_matrix(plan: BenchPlan, samples_csv_path: Path | None = None) -> list[RunSample]:
    """Execute repeats x runnable-configs, interleaved round-robin.

    Digest equality across all samples is a hard failure; a partial samples
    CSV is flushed before the error propagates.
    """
    runnable = [ladder_config(n) for n in plan.configs if ladder_config(n).runnable]
    creds_dir = plan.workdir / "creds"
    if runnable and not creds_dir.exists():
        gen_workload_credentials(plan.workload_id, 2, creds_dir)

    samples: list[RunSample] = []
    reference_digest: str | None = None
    try:
        for run_idx in range(plan.repeats):
            for cfg in runnable:
                sample = _execute_one(plan, cfg, run_idx, creds_dir)
                samples.append(sample)
                if reference_digest is None:
                    reference_digest = sample.output_digest
                elif sample.output_digest != reference_digest:
                    raise BenchError(
                        f"output digest mismatch in {cfg.name} run {run_idx}: security "
                        "layers changed the merged result"
                    )
    except (BenchError, ClusterError):
        if samples_csv_path is not None:
            samples_csv_path.write_bytes(emit_samples_csv(samples))
        raise
    if samples_csv_path is not None:
        samples_csv_path.write_bytes(emit_samples_csv(samples))
    return samples
