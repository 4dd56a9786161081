import json
import warnings

import numpy as np
import pytest

from lobmm.cli import main, parse_seeds
from lobmm.mdp.kernel import SideKernel
from lobmm.mdp.problems import solve_pair
from lobmm.mdp.store import StoreError, pair_block, read_values, save_model, write_values
from lobmm.mdp.surfaces import pair_over_positions, pair_over_queues, surface_tables
from lobmm.reports import build_report, data_hist, mass_above, percentile_bin, sha256_of
from lobmm.backtester import PairTable
from lobmm.simulator import ModelSpec, run, to_records
from lobmm.synthetic import desk_futures


@pytest.fixture(scope="module")
def small_pair():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        spec = ModelSpec.from_calibration(desk_futures(20), "II", q_max=20)
    return solve_pair(SideKernel.from_spec(spec, Q=5), S=1)


# --- value store ---------------------------------------------------------------------------

def test_store_roundtrip(tmp_path, small_pair):
    save_model(tmp_path / "v.bin", small_pair)
    V, meta = read_values(tmp_path / "v.bin")
    assert np.array_equal(V, small_pair.solution.V)
    assert meta["problem"] == "pair" and meta["Q"] == 5 and meta["count"] == V.size
    t = PairTable.load(tmp_path / "v.bin")
    ref = PairTable.from_model(small_pair)
    assert np.array_equal(t.values, ref.values) and np.array_equal(t.keep, ref.keep)


def test_store_layout_is_little_endian_f64(tmp_path):
    write_values(tmp_path / "x.bin", np.array([1.5, -2.0]), {"problem": "test"})
    raw = (tmp_path / "x.bin").read_bytes()
    assert raw[:8] == b"LOBMMVAL"
    assert int.from_bytes(raw[8:12], "little") == 1
    assert int.from_bytes(raw[16:24], "little") == 2
    assert np.frombuffer(raw[24:], dtype="<f8").tolist() == [1.5, -2.0]


def test_store_rejects_corruption(tmp_path):
    write_values(tmp_path / "x.bin", np.zeros(3), {"problem": "test"})
    raw = (tmp_path / "x.bin").read_bytes()
    (tmp_path / "x.bin").write_bytes(raw[:-8])
    with pytest.raises(StoreError, match="expected 3"):
        read_values(tmp_path / "x.bin")
    (tmp_path / "x.bin").write_bytes(b"NOTVALUE" + raw[8:])
    with pytest.raises(StoreError, match="not a value table"):
        read_values(tmp_path / "x.bin")
    with pytest.raises(StoreError, match="pair problem"):
        pair_block(np.zeros(3), {"problem": "buy-one"})


def test_surfaces_cover_valid_states(small_pair):
    t = PairTable.from_model(small_pair)
    rows = pair_over_queues(t.values, t.keep, 5, 2, 1)
    assert len(rows) == 4 * 5 and all(r[0] >= 2 for r in rows)
    rows = pair_over_positions(t.values, t.keep, 3, 4)
    assert len(rows) == 12
    assert rows[0][4] == pytest.approx(small_pair.value(3, 4, 1, 1))


def test_buy_one_surfaces(tmp_path, small_pair):
    save_model(tmp_path / "o.bin", small_pair.one_unit)
    V, meta = read_values(tmp_path / "o.bin")
    tabs = surface_tables(V, meta)
    assert set(tabs) == {"buy_one_qa2", "buy_one_qa5"}
    ou = small_pair.one_unit
    for x, y, q, v, d in tabs["buy_one_qa5"][1]:
        assert v == ou.value(ou.idx_A(x, y, q))
        assert d == ("wait" if ou.decision(ou.idx_A(x, y, q)) == "wait" else "cancel")


# --- reports -------------------------------------------------------------------------------

def test_empty_run_dir_gives_empty_index(tmp_path):
    (tmp_path / "run").mkdir()
    assert build_report(tmp_path / "run", tmp_path / "out") == {"files": []}
    assert main(["report", "--run-dir", str(tmp_path / "run"), "--out", str(tmp_path / "out2")]) == 0
    assert json.loads((tmp_path / "out2" / "index.json").read_text()) == {"files": []}


def test_percentile_helpers():
    h = np.array([0, 10, 70, 10, 10])
    assert percentile_bin(h, 0.9) == 3
    assert mass_above(h, 3) == pytest.approx(0.1)


def test_data_hist_samples_each_second():
    spec = ModelSpec.from_calibration(desk_futures(20), "II", seed=1, q_max=20)
    res = run(spec, 300.0, record=True)
    h = data_hist(to_records(res.path), 20)
    assert abs(h.sum() / 2 - 300) <= 2
    # the simulator's own 1 Hz sampler sees the same book
    ref = res.stats.pooled_hist()
    assert np.abs(h - ref).sum() <= 8


# --- command line --------------------------------------------------------------------------

def test_help_exits_zero(capsys):
    assert main(["solve", "--help"]) == 0
    assert "--problem" in capsys.readouterr().out


def test_usage_errors_exit_one(tmp_path, capsys):
    assert main([]) == 1
    assert main(["solve", "--problem", "sell-two"]) == 1
    assert main(["calibrate"]) == 1
    assert "--input is required" in capsys.readouterr().err


def test_missing_input_exits_two(tmp_path, capsys):
    missing = tmp_path / "nope.csv"
    assert main(["calibrate", "--input", str(missing), "--out", str(tmp_path / "m.json")]) == 2
    assert str(missing) in capsys.readouterr().err
    assert main(["backtest", "--data", str(tmp_path / "*.csv"), "--out", str(tmp_path / "r.json")]) == 2


def test_malformed_data_exits_two(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("ts_ns,kind,side,price_ticks,size_contracts,bb_qty,ba_qty\n1,X,B,1,1,1,1\n")
    assert main(["calibrate", "--input", str(bad), "--out", str(tmp_path / "m.json")]) == 2
    assert "bad.csv:2" in capsys.readouterr().err


def test_config_unknown_keys_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"horizon": 5, "colour": "blue"}))
    assert main(["simulate", "--config", str(cfg)]) == 1
    assert "colour" in capsys.readouterr().err


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "c.json"
    out = tmp_path / "s.csv"
    cfg.write_text(json.dumps({"horizon": 5, "seeds": "0..2", "out": str(out), "variant": "0"}))
    assert main(["simulate", "--config", str(cfg), "--seeds", "4"]) == 0
    man = json.loads((tmp_path / "s.csv.manifest.json").read_text())
    assert man["config"]["seeds"] == "4" and man["config"]["horizon"] == 5.0 and man["config"]["variant"] == "0"
    assert {int(line.split(",")[0]) for line in out.read_text().splitlines()[1:]} == {4}


def test_bad_thread_env(monkeypatch, tmp_path):
    monkeypatch.setenv("LOBMM_THREADS", "zero")
    assert main(["simulate", "--horizon", "1", "--out", str(tmp_path / "s.csv")]) == 1


def test_seed_lists():
    assert parse_seeds("0..3") == [0, 1, 2, 3]
    assert parse_seeds("5,7") == [5, 7]


def test_threads_do_not_change_results(monkeypatch, tmp_path):
    args = ["simulate", "--horizon", "20", "--seeds", "0..2"]
    assert main(args + ["--out", str(tmp_path / "a.csv")]) == 0
    monkeypatch.setenv("LOBMM_THREADS", "2")
    assert main(args + ["--out", str(tmp_path / "b.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    steps = [
        ["simulate", "--variant", "II", "--horizon", "900", "--seeds", "0..1", "--events", str(d / "days"),
         "--out", str(d / "stats.csv")],
        ["calibrate", "--input", str(d / "days" / "*.csv"), "--q-max", "20", "--min-count", "50",
         "--out", str(d / "model.v1.json"), "--diagnostics", str(d / "diag")],
        ["solve", "--model", str(d / "model.v1.json"), "--problem", "pair", "--q-max", "8",
         "--out", str(d / "values.bin"), "--surfaces", str(d / "surf")],
        ["backtest", "--data", str(d / "days" / "*.csv"), "--values", str(d / "values.bin"),
         "--out", str(d / "report.json"), "--curve", str(d / "pnl.csv")],
        ["report", "--run-dir", str(d), "--out", str(d / "rep"), "--data", str(d / "days" / "*.csv"),
         "--q-max", "20"],
    ]
    for s in steps:
        assert main(s) == 0, s
    return d


def test_pipeline_outputs(pipeline):
    d = pipeline
    rep = json.loads((d / "report.json").read_text())
    assert [a["strategy"] for a in rep["aggregate"]] == ["locally_optimal", "naive(0)", "naive(250)", "naive(400)"]
    assert (d / "pnl.csv").read_text().startswith("strategy,day,t,cum_pnl\n")
    idx = json.loads((d / "rep" / "index.json").read_text())
    kinds = {e["kind"] for e in idx["files"]}
    assert {"surface", "pnl_curve", "strategy_table", "histogram", "tail"} <= kinds
    for e in idx["files"]:
        assert sha256_of(d / "rep" / e["path"]) == e["sha256"]


def test_manifests_list_every_output(pipeline):
    d = pipeline
    for name in ("stats.csv", "model.v1.json", "values.bin", "report.json"):
        man = json.loads((d / f"{name}.manifest.json").read_text())
        assert set(man["versions"]) == {"lobmm", "numpy", "scipy", "python"}
        for path, digest in man["outputs"].items():
            assert sha256_of(path) == digest
    solve = json.loads((d / "values.bin.manifest.json").read_text())
    assert str(d / "values.bin.json") in solve["outputs"]
    assert str(d / "model.v1.json") in solve["inputs"]


@pytest.mark.parametrize("name", ["stats.csv", "model.v1.json", "values.bin", "report.json"])
def test_rerun_from_manifest_reproduces_hashes(pipeline, name):
    d = pipeline
    man = json.loads((d / f"{name}.manifest.json").read_text())
    before = dict(man["outputs"])
    assert main([man["command"], "--config", str(d / f"{name}.manifest.json"),
                 "--manifest", str(d / f"{name}.rerun.json")]) == 0
    after = json.loads((d / f"{name}.rerun.json").read_text())["outputs"]
    assert after == before


def test_reports_are_byte_identical(pipeline, tmp_path):
    d = pipeline
    assert main(["report", "--run-dir", str(d), "--out", str(tmp_path / "again"), "--data",
                 str(d / "days" / "*.csv"), "--q-max", "20"]) == 0
    a = json.loads((d / "rep" / "index.json").read_text())
    b = json.loads((tmp_path / "again" / "index.json").read_text())
    assert [(e["path"], e["sha256"]) for e in a["files"]] == [(e["path"], e["sha256"]) for e in b["files"]]


def test_backtest_monte_carlo(tmp_path, pipeline):
    d = pipeline
    out = tmp_path / "mc.json"
    assert main(["backtest", "--mc-runs", "2", "--model", str(d / "model.v1.json"), "--values",
                 str(d / "values.bin"), "--naive-qmin", "0", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert [m["strategy"] for m in rep["monte_carlo"]] == ["locally_optimal", "naive(0)"]
    assert set(rep["monte_carlo_z"]) == {"naive(0)"}


def test_solve_rejects_large_extended_grid(tmp_path):
    assert main(["solve", "--problem", "pair-ext", "--q-max", "20", "--out", str(tmp_path / "v.bin")]) == 1


def test_solve_buy_one_and_extended(tmp_path):
    assert main(["solve", "--problem", "buy-one", "--q-max", "5", "--out", str(tmp_path / "o.bin"),
                 "--surfaces", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "buy_one_qa5.csv").exists()
    assert main(["solve", "--problem", "pair-ext", "--q-max", "4", "--out", str(tmp_path / "e.bin")]) == 0
    t = PairTable.load(tmp_path / "e.bin")
    assert t.values.shape == (10, 10)


def test_report_tail_comparison(tmp_path):
    run_dir = tmp_path / "run"
    for v in ("0", "II"):
        assert main(["simulate", "--model", "model0-matched", "--q-max", "50", "--variant", v,
                     "--horizon", "20000", "--seed", "3",
                     "--out", str(run_dir / f"stats_model{v}.csv")]) == 0
    assert main(["report", "--run-dir", str(run_dir), "--out", str(tmp_path / "rep")]) == 0
    rows = (tmp_path / "rep" / "queue_tails.csv").read_text().splitlines()[1:]
    mass = {r.split(",")[0]: float(r.split(",")[3]) for r in rows}
    assert mass["stats_modelII.csv"] > mass["stats_model0.csv"]
