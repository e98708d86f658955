"""`cptamp run` and `cptamp summarize`."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import bench

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _ArgError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Reports bad usage through the config exit code instead of exiting."""

    def error(self, message):
        raise _ArgError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cptamp", description="CP-guided binding search benchmarks")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one method on one task over a seed range")
    run.add_argument("--task", required=True, choices=bench.TASKS)
    run.add_argument("--method", required=True, choices=bench.METHODS)
    run.add_argument("--seeds", default=str(bench.DEFAULT_SEEDS), help="N (seeds 0..N-1) or A..B inclusive")
    run.add_argument("--full", action="store_true", help=f"use {bench.FULL_SEEDS} seeds")
    run.add_argument("--max-rollouts", type=int, default=bench.DEFAULT_MAX_ROLLOUTS)
    run.add_argument("--cp-store", type=Path, help="write the last seed's CP store here")
    run.add_argument("--out", type=Path, required=True, help="results CSV")
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--quiet", action="store_true", help="skip the summary table")

    summ = sub.add_parser("summarize", help="summarize one or more results CSVs")
    summ.add_argument("--in", dest="inputs", type=Path, nargs="+", required=True)
    summ.add_argument("--json", action="store_true", help="print JSON instead of a table")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except _ArgError as exc:
        print(f"cptamp: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "run":
            seeds = tuple(range(bench.FULL_SEEDS)) if args.full else bench.parse_seeds(args.seeds)
            cfg = bench.BenchConfig(args.task, args.method, seeds, args.max_rollouts, args.cp_store,
                                    args.out, args.workers)
            cfg.validate()
            try:
                records = bench.run_benchmark(cfg)
            except bench.BenchConfigError:
                raise
            except Exception as exc:
                print(f"cptamp: run failed: {exc}", file=sys.stderr)
                return EXIT_RUNTIME
            if not args.quiet:
                print(bench.format_summary(bench.summarize(records)))
            return EXIT_OK
        records = [r for path in args.inputs for r in bench.read_records(path)]
        rows = bench.summarize(records)
        print(bench.summary_json(rows) if args.json else bench.format_summary(rows))
        return EXIT_OK
    except bench.BenchConfigError as exc:
        print(f"cptamp: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
