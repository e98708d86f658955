import csv
import json

import pytest

from cptamp import bench, cli, cp
from cptamp.bench import BenchConfig, BenchConfigError, RunRecord, parse_seeds, run_benchmark, summarize


def rec(task, method, k, ok=True, seed=0):
    return RunRecord(seed, task, method, k, ok, 1.0, 0)


def strip_timing(path):
    rows = list(csv.reader(open(path)))
    col = rows[0].index("wall_time_ms")
    return [r[:col] + r[col + 1:] for r in rows]


# ---------------------------------------------------------------- summary

def test_relative_reduction_formula():
    recs = [rec("desk", "quasi-random", 100), rec("desk", "cp-bo", 50)]
    rows = {r["method"]: r for r in summarize(recs)}
    assert rows["cp-bo"]["relative_reduction"] == pytest.approx(0.5)
    assert rows["quasi-random"]["relative_reduction"] == pytest.approx(0.0)


def test_single_method_has_no_reduction():
    (row,) = summarize([rec("desk", "cp-bo", 5), rec("desk", "cp-bo", 7)])
    assert "relative_reduction" not in row


def test_hand_computed_statistics():
    ks = [3, 1, 4, 1, 5]
    recs = [rec("pack", "mcts-bo", k, seed=i) for i, k in enumerate(ks)] + [rec("pack", "mcts-bo", 500, False)]
    (row,) = summarize(recs)
    assert row["median"] == 3.0
    assert row["mean"] == pytest.approx(2.8)
    assert row["sd"] == pytest.approx((sum((k - 2.8) ** 2 for k in ks) / 4) ** 0.5)
    assert row["failure_rate"] == pytest.approx(1 / 6)
    assert row["runs"] == 6


def test_empty_summary_is_an_error():
    with pytest.raises(BenchConfigError):
        summarize([])


def test_all_failures_summarize_cleanly():
    (row,) = summarize([rec("desk", "cp-bo", 500, False)])
    assert row["mean"] is None and row["failure_rate"] == 1.0
    assert "-" in bench.format_summary([row])


# ---------------------------------------------------------------- config

def test_seed_parsing():
    assert parse_seeds("3") == (0, 1, 2)
    assert parse_seeds("5..7") == (5, 6, 7)
    for bad in ("x", "0", "7..5", "1..b"):
        with pytest.raises(BenchConfigError):
            parse_seeds(bad)


@pytest.mark.parametrize("kw", [dict(task="kitchen"), dict(method="random"), dict(seeds=()),
                                dict(max_rollouts=0), dict(workers=0)])
def test_bad_configs(kw):
    base = dict(task="desk", method="quasi-random")
    base.update(kw)
    with pytest.raises(BenchConfigError):
        BenchConfig(**base).validate()


def test_unwritable_output_fails_before_running(tmp_path):
    cfg = BenchConfig("desk", "quasi-random", (0,), out=tmp_path / "missing" / "r.csv")
    with pytest.raises(BenchConfigError):
        run_benchmark(cfg)


# ---------------------------------------------------------------- runs

def test_quasi_random_records_and_reproducibility(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        recs = run_benchmark(BenchConfig("desk", "quasi-random", tuple(range(6)), out=p))
    assert len(recs) == 6 and [r.seed for r in recs] == list(range(6))
    assert all(r.rollouts_to_feasible <= 500 for r in recs if r.feasible)
    header = open(a).readline().strip()
    assert header == "seed,task,method,rollouts_to_feasible,feasible,wall_time_ms,cp_store_size_after"
    assert strip_timing(a) == strip_timing(b)
    def untimed(rs):
        return [(r.seed, r.task, r.method, r.rollouts_to_feasible, r.feasible, r.cp_store_size_after) for r in rs]

    assert untimed(bench.read_records(b)) == untimed(recs)


def test_failure_sentinel_is_max_rollouts():
    r, _ = bench.run_one("regrasp", "quasi-random", 0, max_rollouts=2)
    if not r.feasible:
        assert r.rollouts_to_feasible == 2


def test_transfer_store_is_warm_before_the_target(monkeypatch):
    seen = []
    real = bench.uct.search

    def spy(task, sampler, config, cp_dict=None):
        seen.append((task.task_id, cp_dict.n_points if cp_dict is not None else None))
        return real(task, sampler, config, cp_dict)

    monkeypatch.setattr(bench.uct, "search", spy)
    r, d = bench.run_one("desk", "cp-bo-transfer", 0)
    first_target = next(i for i, (t, _) in enumerate(seen) if t == "desk")
    assert {t for t, _ in seen[:first_target]} == {"deskP"}
    assert seen[first_target][1] > 0
    sizes = [n for _, n in seen]
    assert sizes == sorted(sizes)
    assert r.cp_store_size_after == d.n_points >= sizes[-1]


def test_pack_chain_runs_three_predecessors(monkeypatch):
    sessions = []
    monkeypatch.setattr(bench, "_session", lambda tid, s, d, budget, seed: sessions.append((tid, budget)))
    bench.warm_start("pack", 0)
    assert sessions == [("packP1", 30), ("packP2", 30), ("packP3", 30)]


def test_cp_bo_starts_from_an_empty_store():
    r, d = bench.run_one("desk", "cp-bo", 1)
    assert r.cp_store_size_after == d.n_points
    fresh, _ = bench.run_one("desk", "cp-bo", 1)
    assert fresh.rollouts_to_feasible == r.rollouts_to_feasible


def test_workers_do_not_change_records(tmp_path):
    one = run_benchmark(BenchConfig("desk", "mcts-bo", (0, 1, 2), workers=1))
    two = run_benchmark(BenchConfig("desk", "mcts-bo", (0, 1, 2), workers=2))
    assert [(r.seed, r.rollouts_to_feasible) for r in one] == [(r.seed, r.rollouts_to_feasible) for r in two]


def test_cp_store_written(tmp_path):
    store = tmp_path / "store.json"
    run_benchmark(BenchConfig("desk", "cp-bo", (0,), cp_store=store))
    assert cp.load_dict(store).n_points > 0


# ---------------------------------------------------------------- CLI

def test_cli_run_and_summarize(tmp_path, capsys):
    out = tmp_path / "r.csv"
    assert cli.main(["run", "--task", "desk", "--method", "quasi-random", "--seeds", "0..2",
                     "--out", str(out)]) == 0
    assert "quasi-random" in capsys.readouterr().out
    assert cli.main(["summarize", "--in", str(out), "--json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert rows[0]["runs"] == 3 and rows[0]["task"] == "desk"


def test_cli_exit_codes(tmp_path, capsys):
    assert cli.main(["run", "--task", "kitchen", "--method", "cp-bo", "--out", "x.csv"]) == 1
    assert cli.main(["run", "--task", "desk", "--method", "cp-bo", "--seeds", "b",
                     "--out", str(tmp_path / "r.csv")]) == 1
    assert cli.main(["summarize", "--in", str(tmp_path / "none.csv")]) == 1
    empty = tmp_path / "empty.csv"
    empty.write_text(",".join(bench.CSV_FIELDS) + "\n")
    assert cli.main(["summarize", "--in", str(empty)]) == 1


def test_cli_runtime_failure_exit_code(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("simulator crashed")

    monkeypatch.setattr(bench, "run_one", boom)
    assert cli.main(["run", "--task", "desk", "--method", "cp-bo", "--seeds", "1",
                     "--out", str(tmp_path / "r.csv")]) == 2
