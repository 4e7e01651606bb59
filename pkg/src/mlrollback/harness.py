"""Experiment runner: configure a run, execute it, and write metrics/trace files."""
from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import checkpoint as ckpt
from .kernels import make_kernel
from .protocol import MissingLogEntry
from .runtime import DeliveryError, Outcome, Simulation
from .sim import ConfigError, DeadlockError, FailureSpec

CSV_COLUMNS = (
    "run_id", "kernel", "n_procs", "cp_int", "log_size", "fail_rank", "fail_iter", "fail_phase",
    "mode_taken", "recompute_iters_total", "recompute_iters_failed_rank", "replayed_msgs",
    "payload_bytes_peak", "final_metric_hex",
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_MISMATCH = 4
EXIT_PROTOCOL = 5

PROTOCOL_ERRORS = (MissingLogEntry, DeliveryError, DeadlockError)


def metric_hex(value: float) -> str:
    """IEEE-754 bit pattern of ``value`` as 16 hex digits."""
    return struct.pack(">d", value).hex()


def _as_spec(f) -> FailureSpec:
    if isinstance(f, FailureSpec):
        return f
    if isinstance(f, str):
        return FailureSpec.parse(f)
    return FailureSpec(**f)


@dataclass
class RunConfig:
    kernel: str = "cg"
    n_procs: int = 16
    n_iters: int = 50
    seed: int = 1
    cp_int: int | None = None
    log_size: int | None = None
    mode: str = "local"
    failures: list[FailureSpec] = field(default_factory=list)
    out_dir: str | None = None
    # kernel size knobs: n for CG, m (cells per rank edge) for the stencil
    size: int | None = None
    trace: bool = True
    strict: bool = False
    # test hooks
    transactional: bool = True
    disable_replay: bool = False

    def __post_init__(self):
        self.failures = [_as_spec(f) for f in self.failures]

    def resolved(self) -> "RunConfig":
        kernel = make_kernel_for(self)
        cp_int = kernel.default_cp_int if self.cp_int is None else self.cp_int
        log_size = cp_int if self.log_size is None else self.log_size
        return replace(self, cp_int=cp_int, log_size=log_size)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        for alias, name in (("procs", "n_procs"), ("iters", "n_iters"), ("cp-int", "cp_int"),
                            ("log-size", "log_size"), ("out", "out_dir"), ("fail", "failures")):
            if alias in data:
                data[name] = data.pop(alias)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def run_id(self) -> str:
        fails = "+".join(str(f) for f in self.failures) or "none"
        return f"{self.kernel}-p{self.n_procs}-{self.mode}-f{fails}"


@dataclass
class Metrics:
    run_id: str
    kernel: str
    n_procs: int
    cp_int: int
    log_size: int
    fail_rank: str
    fail_iter: str
    fail_phase: str
    mode_taken: str
    recompute_iters_total: int
    recompute_iters_failed_rank: int
    replayed_msgs: int
    payload_bytes_peak: int
    final_metric_hex: str
    final_metric: float = field(default=0.0, repr=False)
    outcome: Outcome | None = field(default=None, repr=False)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in CSV_COLUMNS}


def make_kernel_for(config: RunConfig):
    params = {"seed": config.seed}
    if config.size is not None:
        params["n" if config.kernel == "cg" else "m"] = config.size
    return make_kernel(config.kernel, config.n_procs, **params)


def simulate(config: RunConfig) -> tuple[Simulation, Outcome]:
    config = config.resolved()
    kernel = make_kernel_for(config)
    store = None
    if config.out_dir is not None:
        store = ckpt.FileStore(Path(config.out_dir) / "ckpt", kernel.name)
    sim = Simulation(kernel, n_iters=config.n_iters, cp_int=config.cp_int,
                     log_size=config.log_size, mode=config.mode, failures=config.failures,
                     store=store, seed=config.seed, trace=config.trace, strict=config.strict,
                     transactional=config.transactional, disable_replay=config.disable_replay)
    return sim, sim.run()


def _join(values) -> str:
    return ";".join(str(v) for v in values)


def metrics_from(config: RunConfig, outcome: Outcome, run_id: str | None = None) -> Metrics:
    config = config.resolved()
    failed = sorted({r for rec in outcome.recoveries for r in rec.dead})
    modes = [rec.mode.value for rec in outcome.recoveries]
    return Metrics(
        run_id=run_id or config.run_id(),
        kernel=config.kernel,
        n_procs=config.n_procs,
        cp_int=config.cp_int,
        log_size=config.log_size,
        fail_rank=_join(f.rank for f in config.failures),
        fail_iter=_join(f.iter for f in config.failures),
        fail_phase=_join(f.phase for f in config.failures),
        mode_taken="+".join(modes) or "none",
        recompute_iters_total=sum(outcome.recompute_by_rank),
        recompute_iters_failed_rank=sum(outcome.recompute_by_rank[r] for r in failed),
        replayed_msgs=outcome.replayed,
        payload_bytes_peak=max(outcome.payload_peak_by_rank),
        final_metric_hex=metric_hex(outcome.final_metric),
        final_metric=outcome.final_metric,
        outcome=outcome,
    )


def write_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(csv_text(rows))


def csv_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for m in rows:
        writer.writerow(m.row())
    return buf.getvalue()


def run(config: RunConfig) -> Metrics:
    """Execute one run; with ``out_dir`` set, write metrics.csv and trace.jsonl there."""
    sim, outcome = simulate(config)
    metrics = metrics_from(config, outcome)
    if config.out_dir is not None:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "metrics.csv", [metrics])
        if config.trace:
            sim.world.export_trace(out / "trace.jsonl")
    return metrics


_BASELINES: dict[tuple, float] = {}


def baseline_metric(config: RunConfig) -> float:
    """Final metric of the fault-free run with the same problem, cached."""
    key = (config.kernel, config.n_procs, config.n_iters, config.seed, config.size)
    if key not in _BASELINES:
        clean = replace(config, failures=[], out_dir=None, trace=False, mode="global",
                        transactional=True, disable_replay=False, strict=False, log_size=None)
        _BASELINES[key] = simulate(clean)[1].final_metric
    return _BASELINES[key]


def sweep(template: RunConfig, fail_rank: int, fail_iters, phases=None, *,
          out_csv=None) -> list[Metrics]:
    """One run per (failure iteration, failure phase) point."""
    template = template.resolved()
    if phases is None:
        phases = range(len(make_kernel_for(template).kill_points))
    rows = []
    for it in fail_iters:
        for ph in phases:
            cfg = replace(template, failures=[FailureSpec(fail_rank, it, ph)], out_dir=None)
            rows.append(run(cfg))
    if out_csv is not None:
        write_csv(out_csv, rows)
    return rows


def read_metrics(run_dir) -> list[dict]:
    path = Path(run_dir) / "metrics.csv"
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def verify(run_dir_a, run_dir_b) -> bool:
    """True iff both runs finished and their final metrics are bitwise equal."""
    a, b = read_metrics(run_dir_a), read_metrics(run_dir_b)
    if not a or not b:
        return False
    return a[-1]["final_metric_hex"] == b[-1]["final_metric_hex"]


def config_dict(config: RunConfig) -> dict:
    d = asdict(config)
    d["failures"] = [str(f) for f in config.failures]
    return d
