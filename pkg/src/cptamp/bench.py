"""Benchmark harness: methods x tasks x seeds, with transfer warm-starts.

Every seed owns a fresh world, tree and CP store, so records do not depend
on execution order or worker count. Results stream to CSV in seed order.
"""

from __future__ import annotations

import csv
import json
import math
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from . import cp as cpmod
from . import uct
from .world import build_task

METHODS = ("quasi-random", "mcts-bo", "cp-bo", "cp-bo-transfer")
TASKS = ("desk", "regrasp", "pack")
PREDECESSORS = {
    "desk": ("deskP",),
    "regrasp": ("deskP", "desk"),
    "pack": ("packP1", "packP2", "packP3"),
}
PREDECESSOR_ROLLOUTS = 30
DEFAULT_MAX_ROLLOUTS = 500
DEFAULT_SEEDS = 100
FULL_SEEDS = 1000
CSV_FIELDS = ("seed", "task", "method", "rollouts_to_feasible", "feasible", "wall_time_ms",
              "cp_store_size_after")


class BenchConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunRecord:
    seed: int
    task: str
    method: str
    rollouts_to_feasible: int  # max_rollouts when the run failed
    feasible: bool
    wall_time_ms: float
    cp_store_size_after: int

    def row(self) -> dict:
        out = asdict(self)
        out["feasible"] = int(self.feasible)
        out["wall_time_ms"] = f"{self.wall_time_ms:.1f}"
        return out


@dataclass(frozen=True)
class BenchConfig:
    task: str
    method: str
    seeds: tuple[int, ...] = tuple(range(DEFAULT_SEEDS))
    max_rollouts: int = DEFAULT_MAX_ROLLOUTS
    cp_store: Path | None = None
    out: Path | None = None
    workers: int = 1

    def validate(self) -> None:
        if self.task not in TASKS:
            raise BenchConfigError(f"unknown task {self.task!r}; expected one of {', '.join(TASKS)}")
        if self.method not in METHODS:
            raise BenchConfigError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if not self.seeds:
            raise BenchConfigError("empty seed range")
        if any(s < 0 for s in self.seeds):
            raise BenchConfigError("seeds must be non-negative")
        if self.max_rollouts < 1:
            raise BenchConfigError("max rollouts must be positive")
        if self.workers < 1:
            raise BenchConfigError("workers must be positive")
        for p in (self.out, self.cp_store):
            if p is not None and not Path(p).parent.is_dir():
                raise BenchConfigError(f"directory of {p} does not exist")


def parse_seeds(text: str) -> tuple[int, ...]:
    """'N' means seeds 0..N-1; 'A..B' is inclusive on both ends."""
    try:
        if ".." in text:
            a, b = (int(p) for p in text.split("..", 1))
            if b < a:
                raise BenchConfigError(f"seed range {text!r} is reversed")
            return tuple(range(a, b + 1))
        n = int(text)
    except ValueError:
        raise BenchConfigError(f"bad seed spec {text!r}; use N or A..B") from None
    if n < 1:
        raise BenchConfigError("seed count must be positive")
    return tuple(range(n))


# ---------------------------------------------------------------- running

def _session(task_id: str, sampler, d: cpmod.CPDictionary, budget: int, seed: int) -> None:
    """Spend `budget` rollouts on a task, restarting the search after each success."""
    task = build_task(task_id)
    used = k = 0
    while used < budget:
        res = uct.search(task, sampler, uct.SearchConfig(n_rollout=budget - used, seed=seed + k), d)
        used += res.rollouts_used
        k += 1


def warm_start(task_id: str, seed: int, sampler=None,
               d: cpmod.CPDictionary | None = None) -> cpmod.CPDictionary:
    """Run the predecessor chain of `task_id` into a CP store."""
    d = cpmod.CPDictionary() if d is None else d
    sampler = sampler or uct.make_sampler("cp-bo")
    for j, pred in enumerate(PREDECESSORS[task_id]):
        _session(pred, sampler, d, PREDECESSOR_ROLLOUTS, seed * 1000 + j * 100)
    return d


def run_one(task_id: str, method: str, seed: int,
            max_rollouts: int = DEFAULT_MAX_ROLLOUTS) -> tuple[RunRecord, cpmod.CPDictionary | None]:
    t0 = time.perf_counter()
    d = None
    if method == "cp-bo-transfer":
        sampler = uct.make_sampler("cp-bo")
        d = warm_start(task_id, seed, sampler)
    else:
        sampler = uct.make_sampler(method)
        if method == "cp-bo":
            d = cpmod.CPDictionary()
    res = uct.search(build_task(task_id), sampler, uct.SearchConfig(n_rollout=max_rollouts, seed=seed), d)
    ok = res.feasible_bindings is not None
    rec = RunRecord(seed, task_id, method, res.rollouts_used if ok else max_rollouts, ok,
                    (time.perf_counter() - t0) * 1000.0, d.n_points if d is not None else 0)
    return rec, d


def _run_packed(args):
    return run_one(*args)


def iter_runs(config: BenchConfig) -> Iterator[tuple[RunRecord, cpmod.CPDictionary | None]]:
    jobs = [(config.task, config.method, s, config.max_rollouts) for s in config.seeds]
    if config.workers == 1:
        yield from map(_run_packed, jobs)
        return
    with ProcessPoolExecutor(config.workers) as pool:
        yield from pool.map(_run_packed, jobs)


def run_benchmark(config: BenchConfig) -> list[RunRecord]:
    """Run every seed of `config`, streaming records to `config.out` in seed order.

    When `config.cp_store` is set, the store of the last seed is written there;
    only this process writes it.
    """
    config.validate()
    fh = None
    if config.out is not None:
        try:
            fh = open(config.out, "w", newline="")
        except OSError as exc:
            raise BenchConfigError(f"cannot write {config.out}: {exc}") from exc
    records = []
    try:
        writer = None
        if fh is not None:
            writer = csv.DictWriter(fh, CSV_FIELDS, lineterminator="\n")
            writer.writeheader()
        last = None
        for rec, d in iter_runs(config):
            records.append(rec)
            last = d
            if writer is not None:
                writer.writerow(rec.row())
                fh.flush()
        if config.cp_store is not None and last is not None:
            cpmod.save_dict(last, config.cp_store)
    finally:
        if fh is not None:
            fh.close()
    return records


# ---------------------------------------------------------------- summary

def read_records(path: str | Path) -> list[RunRecord]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise BenchConfigError(f"cannot read {path}: {exc}") from exc
    try:
        return [RunRecord(int(r["seed"]), r["task"], r["method"], int(r["rollouts_to_feasible"]),
                          r["feasible"] in ("1", "True", "true"), float(r["wall_time_ms"]),
                          int(r["cp_store_size_after"])) for r in rows]
    except (KeyError, TypeError, ValueError) as exc:
        raise BenchConfigError(f"{path}: malformed record ({exc})") from exc


def _stats(values: Sequence[int]) -> dict:
    if not values:
        return {"median": None, "mean": None, "sd": None}
    return {"median": float(statistics.median(values)), "mean": float(statistics.fmean(values)),
            "sd": float(statistics.stdev(values)) if len(values) > 1 else 0.0}


def summarize(records: Iterable[RunRecord]) -> list[dict]:
    """Per (task, method) statistics over successful runs plus failure rate.

    Relative reduction is 1 - mean(method) / mean(quasi-random) and is only
    present when the same task also has quasi-random records.
    """
    groups: dict[tuple[str, str], list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.task, r.method), []).append(r)
    if not groups:
        raise BenchConfigError("no records to summarize")
    rows = []
    for (task, method), recs in groups.items():
        ok = [r.rollouts_to_feasible for r in recs if r.feasible]
        rows.append({"task": task, "method": method, "runs": len(recs), **_stats(ok),
                     "failure_rate": 1.0 - len(ok) / len(recs)})
    base = {r["task"]: r["mean"] for r in rows if r["method"] == "quasi-random"}
    for r in rows:
        b = base.get(r["task"])
        if b is not None and r["mean"] is not None and b > 0:
            r["relative_reduction"] = 1.0 - r["mean"] / b
    order = {m: i for i, m in enumerate(METHODS)}
    rows.sort(key=lambda r: (r["task"], order.get(r["method"], len(order)), r["method"]))
    return rows


def format_summary(rows: list[dict]) -> str:
    def num(v, pct=False):
        if v is None or (isinstance(v, float) and math.isnan(v)):
            return "-"
        return f"{100 * v:.2f}%" if pct else f"{v:.2f}"

    head = ("task", "method", "runs", "median", "mean", "sd", "fail", "reduction")
    body = [(r["task"], r["method"], str(r["runs"]), num(r["median"]), num(r["mean"]), num(r["sd"]),
             num(r["failure_rate"], True), num(r.get("relative_reduction"), True)) for r in rows]
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in (head, *body)]
    return "\n".join(lines)


def summary_json(rows: list[dict]) -> str:
    return json.dumps(rows, indent=2, sort_keys=True)
