"""Command line entry point: ``mlrollback run|sweep|verify``.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 final metric differs
from the fault-free run, 5 protocol bug (missing log entry, misdelivered
message or deadlock).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .checkpoint import CheckpointError
from .harness import (EXIT_CONFIG, EXIT_IO, EXIT_MISMATCH, EXIT_OK, EXIT_PROTOCOL,
                      PROTOCOL_ERRORS, RunConfig)
from .sim import ConfigError, FailureSpec

log = logging.getLogger("mlrollback")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with the same keys as the flags")
    p.add_argument("--kernel", choices=("cg", "stencil"))
    p.add_argument("--procs", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--cp-int", type=int)
    p.add_argument("--log-size", type=int)
    p.add_argument("--mode", choices=("local", "global", "hybrid"))
    p.add_argument("--size", type=int, help="CG matrix order or stencil cells per rank edge")
    p.add_argument("--out")


def _config(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    overrides = {
        "kernel": args.kernel, "n_procs": args.procs, "n_iters": args.iters, "seed": args.seed,
        "cp_int": args.cp_int, "log_size": args.log_size, "mode": args.mode,
        "size": args.size, "out_dir": args.out,
    }
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    if getattr(args, "fail", None):
        cfg = replace(cfg, failures=[FailureSpec.parse(f) for f in args.fail])
    return cfg


def _range(text: str) -> range:
    lo, _, hi = text.partition(":")
    return range(int(lo), int(hi)) if hi else range(int(lo), int(lo) + 1)


def cmd_run(args) -> int:
    cfg = _config(args)
    metrics = harness.run(cfg)
    print(harness.csv_text([metrics]), end="")
    if cfg.out_dir:
        with open(Path(cfg.out_dir) / "config.json", "w") as fh:
            json.dump(harness.config_dict(cfg), fh, indent=2, sort_keys=True)
    if cfg.failures and metrics.final_metric != harness.baseline_metric(cfg):
        log.error("final metric differs from the fault-free run")
        return EXIT_MISMATCH
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    phases = [int(p) for p in args.phases.split(",")] if args.phases else None
    out_csv = None
    if cfg.out_dir:
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        out_csv = Path(cfg.out_dir) / "sweep.csv"
    rows = harness.sweep(cfg, args.fail_rank, _range(args.fail_iters), phases, out_csv=out_csv)
    print(harness.csv_text(rows), end="")
    base = harness.metric_hex(harness.baseline_metric(cfg.resolved()))
    bad = [m.run_id for m in rows if m.final_metric_hex != base]
    if bad:
        log.error("%d runs differ from the fault-free metric: %s", len(bad), ", ".join(bad))
        return EXIT_MISMATCH
    return EXIT_OK


def cmd_verify(args) -> int:
    same = harness.verify(args.run_a, args.run_b)
    print("match" if same else "mismatch")
    return EXIT_OK if same else EXIT_MISMATCH


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlrollback", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="one simulation")
    _add_run_flags(p)
    p.add_argument("--fail", action="append", metavar="RANK:ITER:PHASE")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="one run per failure iteration and phase")
    _add_run_flags(p)
    p.add_argument("--fail-rank", type=int, default=0)
    p.add_argument("--fail-iters", required=True, metavar="LO:HI")
    p.add_argument("--phases", help="comma separated failure phases (default: all)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="compare the final metric of two run directories")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (OSError, CheckpointError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except PROTOCOL_ERRORS as exc:
        log.error("protocol error: %s", exc)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
