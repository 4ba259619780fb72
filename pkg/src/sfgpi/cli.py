"""Command line entry point: ``sfgpi <subcommand> [--config PATH] [--seed N] [--out DIR] [--format csv|json]``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys

from .config import ExperimentConfig, load_config
from .harness import (
    HarnessError,
    cmd_learn_sf,
    cmd_oracle,
    cmd_run_suite,
    cmd_run_task,
    cmd_sample_complexity,
    cmd_verify_theorem,
    curves_csv,
    oracle_values_csv,
)
from .sf import FULL, MODES
from .tasks import TaskCompileError, TaskParseError

log = logging.getLogger("sfgpi")

METHOD_CHOICES = ("gpi-exact", "gpi-learned", "gpi-entangled", "gpi-offdiag", "baseline-q")


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # Subcommand copies use SUPPRESS so they only override when actually given.
    d = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", default=d, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, default=d, help="run a single seed instead of the config's list")
    p.add_argument("--out", metavar="DIR", default=d, help="output directory")
    p.add_argument("--format", choices=("csv", "json"), default=argparse.SUPPRESS if suppress else "json")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sfgpi", parents=[_global_flags(False)])
    sub = parser.add_subparsers(dest="command", required=True)
    flags = _global_flags(True)

    p = sub.add_parser("learn-sf", parents=[flags], help="learn or build the SF matrix and save it")
    p.add_argument("--method", choices=METHOD_CHOICES[:4])

    p = sub.add_parser("verify-theorem", parents=[flags], help="exhaustive goal-achievability campaign")
    p.add_argument("--method", choices=("gpi-exact", "gpi-learned", "gpi-offdiag"))
    p.add_argument("--mode", choices=MODES, default=FULL, help="storage mode for the exact matrix")
    p.add_argument("--require-oic", action="store_true",
                   help="refuse unless the features are optimally independently controllable")

    p = sub.add_parser("run-task", parents=[flags], help="learning curve for one task phrase")
    p.add_argument("task", help='e.g. "square top left and agent bottom right"')
    p.add_argument("--method", choices=METHOD_CHOICES)

    sub.add_parser("run-suite", parents=[flags], help="every task, seed and method in the config")

    p = sub.add_parser("sample-complexity", parents=[flags], help="break-even task count")
    p.add_argument("--erl-steps", type=float)
    p.add_argument("--gpi-per-task", type=float)
    p.add_argument("--baseline-per-task", type=float)
    p.add_argument("--run-record", metavar="PATH", help="derive per-task costs from a suite's run record")
    p.add_argument("--k", type=int, help="feature count, adds the guaranteed (m+1)^k task total")

    sub.add_parser("oracle", parents=[flags], help="dump the exact SF matrix and optimal values")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    updates = {}
    if args.seed is not None:
        updates["seeds"] = [args.seed]
    if args.out is not None:
        updates["output_dir"] = args.out
    if updates:
        cfg = cfg.model_copy(update=updates)
    return cfg


def _flat_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["key", "value"])

    def walk(prefix, value):
        if isinstance(value, dict):
            for key in value:
                walk(f"{prefix}.{key}" if prefix else str(key), value[key])
        elif isinstance(value, list):
            writer.writerow([prefix, json.dumps(value)])
        else:
            writer.writerow([prefix, value])

    walk("", report)
    return buf.getvalue()


def _emit(report: dict, fmt: str) -> None:
    if fmt == "csv":
        sys.stdout.write(_flat_csv(report))
    else:
        sys.stdout.write(json.dumps(report, indent=2, sort_keys=True) + "\n")


def _run(args) -> int:
    cfg = _config(args)
    if args.command == "learn-sf":
        _emit(cmd_learn_sf(cfg, args.method), args.format)
        return 0

    if args.command == "verify-theorem":
        report = cmd_verify_theorem(cfg, args.method, args.require_oic, args.mode)
        _emit(report, args.format)
        if report["failures"]:
            if report["exact"]:
                log.error("%d goal(s) not achieved with exact SFs", len(report["failures"]))
                return 1
            log.warning("%d goal(s) not achieved with learned SFs (best effort)", len(report["failures"]))
        return 0

    if args.command == "run-task":
        runs = cmd_run_task(cfg, args.task, args.method)
        if args.format == "csv":
            sys.stdout.write(curves_csv(runs))
        else:
            _emit({"runs": [{"method": r.method, "category": r.category, "seed": r.seed,
                             "task_text": r.task_text, "curve": [list(p) for p in r.curve]}
                            for r in runs]}, "json")
        return 0

    if args.command == "run-suite":
        _emit(cmd_run_suite(cfg), args.format)
        return 0

    if args.command == "sample-complexity":
        sc = cfg.sample_complexity
        updates = {k: v for k, v in (("erl_steps", args.erl_steps), ("gpi_per_task", args.gpi_per_task),
                                     ("baseline_per_task", args.baseline_per_task),
                                     ("run_record", args.run_record)) if v is not None}
        if updates:
            cfg = cfg.model_copy(update={"sample_complexity": sc.model_copy(update=updates)})
        _emit(cmd_sample_complexity(cfg, args.k), args.format)
        return 0

    if args.command == "oracle":
        result = cmd_oracle(cfg)
        values = oracle_values_csv(result["values"], result["matrix"].m)
        (result["dir"] / "optimal_values.csv").write_text(values)
        if args.format == "csv":
            sys.stdout.write(values)
        else:
            m = result["matrix"]
            _emit({"matrix_file": str(result["dir"] / "oracle_sf_matrix.npz"),
                   "values_file": str(result["dir"] / "optimal_values.csv"),
                   "k": m.k, "m": m.m, "state_count": m.state_count,
                   "action_count": m.action_count, "gamma": m.gamma}, "json")
        return 0
    raise AssertionError(args.command)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return _run(args)
    except TaskParseError as err:
        print(f"error: task parse failed at offset {err.offset}: {err}", file=sys.stderr)
    except (HarnessError, TaskCompileError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    raise SystemExit(main())
