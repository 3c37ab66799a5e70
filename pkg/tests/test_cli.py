import json
import subprocess
import sys

import numpy as np
import pytest

from sbp import cli
from sbp.data import SeriesFrame, write_csv
from sbp.rng import CounterRNG
from sbp.tcn import TrainingError

SMALL = {
    "tcn": {"context_length": 16, "channels": 4, "dilations": [1, 2, 4], "n_bins": 20},
    "train": {"epochs": 2},
    "synth": {"length": 2000},
}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def read(path):
    return open(path, "rb").read()


def test_synth_deterministic(tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["synth", "--out", str(tmp_path / "b")]) == 0
    a, b = tmp_path / "a" / "series.csv", tmp_path / "b" / "series.csv"
    assert read(a) == read(b)
    assert len(read(a).splitlines()) == 20001  # header + default length
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["outputs"]["series.csv"] == cli.sha256_file(a)
    assert manifest["seeds"]["synth"] == 7 and "duration_seconds" in manifest


def test_synth_seed_flag(tmp_path):
    cli.main(["synth", "--out", str(tmp_path / "a"), "--seed", "8"])
    cli.main(["synth", "--out", str(tmp_path / "b")])
    assert read(tmp_path / "a" / "series.csv") != read(tmp_path / "b" / "series.csv")


def test_synth_invalid_nu(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"noise": {"kind": "student_t", "nu": 0}}))
    assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "nu" in capsys.readouterr().err


def test_usage_error_exit_code(tmp_path):
    with pytest.raises(SystemExit) as info:
        cli.main(["evaluate", "--model", "prophet", "--out", str(tmp_path)])
    assert info.value.code == 2


def test_fit_deterministic(tmp_path, small_config):
    for name in ("a", "b"):
        assert cli.main(["fit", "--config", small_config, "--out", str(tmp_path / name), "--seed", "3"]) == 0
    assert read(tmp_path / "a" / "model.sbpm") == read(tmp_path / "b" / "model.sbpm")
    log = (tmp_path / "a" / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,train_nll,val_nll" and len(log) == 3


def test_flags_override_config(tmp_path, small_config):
    cli.main(["fit", "--config", small_config, "--out", str(tmp_path), "--bins", "12", "--q", "0.1"])
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert doc["config"]["tcn"]["n_bins"] == 12
    assert doc["config"]["train"]["tail_mass"] == 0.1
    assert doc["config"]["tcn"]["context_length"] == 16


def test_fit_too_short(tmp_path, small_config):
    data = tmp_path / "short.csv"
    write_csv(SeriesFrame(np.arange(10.0)), data)
    assert cli.main(["fit", "--config", small_config, "--data", str(data), "--out", str(tmp_path / "o")]) == 2


def test_numerical_failure_exit_code(tmp_path, small_config, monkeypatch):
    def boom(*args, **kwargs):
        raise TrainingError(0, 0, float("nan"))

    monkeypatch.setattr(cli, "train", boom)
    assert cli.main(["fit", "--config", small_config, "--out", str(tmp_path)]) == 3


def test_evaluate_sbp_report(tmp_path, small_config):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["evaluate", "--model", "sbp", "--config", small_config, "--out", str(out_a)]) == 0
    assert cli.main(["evaluate", "--model", "sbp", "--config", small_config, "--out", str(out_b)]) == 0
    report = json.loads((out_a / "report.json").read_text())
    assert report["model"] == "SBP" and 0.0 <= report["mae"] <= 1.0
    assert len(report["levels"]) == 100
    for name in ("report.json", "pp.csv", "pp.svg", "model.sbpm", "manifest.json"):
        assert (out_a / name).exists()
    for name in ("report.json", "pp.csv", "pp.svg", "model.sbpm"):
        assert read(out_a / name) == read(out_b / name)


def test_evaluate_saved_model(tmp_path, small_config):
    cli.main(["fit", "--config", small_config, "--out", str(tmp_path / "fit"), "--split"])
    model = str(tmp_path / "fit" / "model.sbpm")
    assert cli.main(["evaluate", "--model-file", model, "--config", small_config, "--out", str(tmp_path / "ev")]) == 0
    assert json.loads((tmp_path / "ev" / "report.json").read_text())["model"] == "SBP"
    assert cli.main(["evaluate", "--model-file", str(tmp_path / "nope.sbpm"), "--out", str(tmp_path / "x")]) == 2


@pytest.mark.parametrize("model", ["spot", "dspot"])
def test_evaluate_baselines_full_grid(tmp_path, small_config, model):
    assert cli.main(["evaluate", "--model", model, "--config", small_config, "--grid", "full", "--out", str(tmp_path)]) == 0
    assert len(json.loads((tmp_path / "report.json").read_text())["levels"]) == 99


@pytest.fixture(scope="module")
def exp_stream(tmp_path_factory):
    path = tmp_path_factory.mktemp("stream") / "exp.csv"
    write_csv(SeriesFrame(-np.log(CounterRNG(77).random(25_000))), path)
    return str(path)


def test_detect_rate(tmp_path, exp_stream):
    assert cli.main(["detect", "--data", exp_stream, "--q", "1e-3", "--init", "5000", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "outcomes.csv").read_text().splitlines()
    assert lines[0] == "index,kind,z_q"
    kinds = [line.split(",")[1] for line in lines[1:]]
    assert len(kinds) == 20_000 and set(kinds) <= {"normal", "peak", "anomaly"}
    rate = kinds.count("anomaly") / len(kinds)
    assert abs(rate - 1e-3) <= 5e-4


@pytest.mark.parametrize("detector", ["spot", "dspot"])
def test_detect_resume_matches_uninterrupted(tmp_path, detector):
    data = tmp_path / "s.csv"
    write_csv(SeriesFrame(CounterRNG(5).normal(3000)), data)
    base = ["detect", "--detector", detector, "--data", str(data), "--q", "1e-2", "--init", "1000"]
    assert cli.main(base + ["--out", str(tmp_path / "full")]) == 0
    assert cli.main(base + ["--out", str(tmp_path / "p1"), "--stop", "2000"]) == 0
    snap = str(tmp_path / "p1" / "snapshot.json")
    assert cli.main(base + ["--out", str(tmp_path / "p2"), "--resume", snap]) == 0
    joined = read(tmp_path / "p1" / "outcomes.csv") + read(tmp_path / "p2" / "outcomes.csv")
    assert joined == read(tmp_path / "full" / "outcomes.csv")
    assert read(tmp_path / "p2" / "snapshot.json") == read(tmp_path / "full" / "snapshot.json")


def test_detect_missing_file(tmp_path):
    assert cli.main(["detect", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "o")]) == 2


def test_detect_wrong_snapshot(tmp_path):
    data = tmp_path / "s.csv"
    write_csv(SeriesFrame(CounterRNG(6).normal(500)), data)
    cli.main(["detect", "--data", str(data), "--q", "1e-2", "--stop", "300", "--out", str(tmp_path / "a")])
    snap = str(tmp_path / "a" / "snapshot.json")
    args = ["detect", "--detector", "dspot", "--data", str(data), "--resume", snap, "--out", str(tmp_path / "b")]
    assert cli.main(args) == 2


def test_compare_table(tmp_path, small_config):
    for name in ("a", "b"):
        assert cli.main(["compare", "--config", small_config, "--out", str(tmp_path / name)]) == 0
    table = (tmp_path / "a" / "compare.csv").read_text().splitlines()
    assert table[0] == "model,mae"
    assert [row.split(",")[0] for row in table[1:]] == ["SPOT", "DSPOT", "TCN-SPOT", "SBP"]
    assert read(tmp_path / "a" / "compare.csv") == read(tmp_path / "b" / "compare.csv")
    assert read(tmp_path / "a" / "report.json") == read(tmp_path / "b" / "report.json")


def test_rerun_from_manifest(tmp_path, small_config):
    first = tmp_path / "first"
    assert cli.main(["evaluate", "--model", "dspot", "--config", small_config, "--q-detect", "0.01", "--out", str(first)]) == 0
    again = tmp_path / "again"
    assert cli.main(["rerun", str(first / "manifest.json"), "--out", str(again)]) == 0
    m1 = json.loads((first / "manifest.json").read_text())
    m2 = json.loads((again / "manifest.json").read_text())
    assert m1["outputs"] == m2["outputs"] and m1["config"] == m2["config"]


def test_rerun_detects_changed_input(tmp_path):
    data = tmp_path / "s.csv"
    write_csv(SeriesFrame(CounterRNG(7).normal(400)), data)
    cli.main(["detect", "--data", str(data), "--q", "1e-2", "--out", str(tmp_path / "a")])
    write_csv(SeriesFrame(CounterRNG(8).normal(400)), data)
    assert cli.main(["rerun", str(tmp_path / "a" / "manifest.json")]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "sbp", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "0.1.0" in res.stdout
