import csv
import json
import subprocess
import sys

import pytest

from censelect.cli import main
from censelect.io import read_dataset, write_dataset
from censelect.simulation import DgpConfig, simulate
from censelect.survival import Dataset


def _write_json(path, obj):
    path.write_text(json.dumps(obj), encoding="utf-8")
    return str(path)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def trial_csv(tmp_path):
    config = _write_json(tmp_path / "sim.json",
                         {"dgp": {"n": 200, "p": 10, "b": 1.0, "g": 1.0, "gamma1": 1.0}})
    out = tmp_path / "trial.csv"
    assert main(["simulate", "--config", config, "--seed", "11", "--out", str(out)]) == 0
    return out


def test_simulate_round_trip(trial_csv, tmp_path):
    data = read_dataset(trial_csv)
    assert data == simulate(DgpConfig(n=200, p=10, b=1.0, g=1.0, gamma1=1.0, seed=11))
    again = tmp_path / "again.csv"
    write_dataset(data, again)
    assert again.read_bytes() == trial_csv.read_bytes()
    stamp = json.loads((tmp_path / "trial.csv.manifest.json").read_text())
    assert stamp["command"] == "simulate" and stamp["seed"] == 11
    assert stamp["config"]["dgp"]["seed"] == 11
    assert set(stamp["versions"]) == {"censelect", "python", "numpy", "scipy", "numba"}


def test_zero_rows_is_a_config_error(tmp_path, capsys):
    config = _write_json(tmp_path / "bad.json", {"dgp": {"n": 0}})
    assert main(["simulate", "--config", config, "--out", str(tmp_path / "x.csv")]) == 2
    assert "n must be" in capsys.readouterr().err


def test_unknown_config_field(tmp_path):
    config = _write_json(tmp_path / "bad.json", {"dgp": {}, "colour": 1})
    assert main(["simulate", "--config", config, "--out", str(tmp_path / "x.csv")]) == 2


def test_invalid_json(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text("{", encoding="utf-8")
    assert main(["type1", "--config", str(path)]) == 2
    assert "invalid JSON" in capsys.readouterr().err


def test_bad_treatment_reports_line(tmp_path, capsys):
    path = tmp_path / "bad.csv"
    path.write_text("time,status,treatment,X1\n1.0,1,0,0.5\n2.0,0,2,0.1\n", encoding="utf-8")
    assert main(["analyze", str(path), "--method", "logrank"]) == 3
    err = capsys.readouterr().err
    assert "line 3" in err and "treatment" in err


def test_missing_data_file(tmp_path):
    assert main(["analyze", str(tmp_path / "nope.csv")]) == 3


def test_analyze_without_covariates(tmp_path, capsys):
    data = Dataset([1.0, 2.0, 3.0, 4.0, 5.0, 6.0], [1, 1, 0, 1, 1, 0], [0, 1, 0, 1, 0, 1],
                   [[]] * 6, ())
    path = tmp_path / "plain.csv"
    write_dataset(data, path)
    assert main(["analyze", str(path), "--method", "post_lasso", "--folds", "2"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["final_adjustment_set"] == []
    assert [row["name"] for row in report["coefficients"]] == ["treatment"]


def test_analyze_double_contains_post(trial_csv, tmp_path):
    reports = {}
    for method in ("post_lasso", "double"):
        out = tmp_path / f"{method}.json"
        assert main(["analyze", str(trial_csv), "--method", method, "--folds", "10",
                     "--times", "0,1,2", "--out", str(out)]) == 0
        reports[method] = json.loads(out.read_text())
    post, double = reports["post_lasso"], reports["double"]
    assert set(post["final_adjustment_set"]) <= set(double["final_adjustment_set"])
    assert post["survival_support"] == double["survival_support"]
    assert [c["survival"] for c in double["curves"] if c["time"] == 0] == [1.0, 1.0]
    assert 0 <= double["treatment_test"]["p_value"] <= 1


def test_analyze_forced_in(trial_csv, capsys):
    assert main(["analyze", str(trial_csv), "--folds", "10", "--forced-in", "X10"]) == 0
    assert "X10" in json.loads(capsys.readouterr().out)["final_adjustment_set"]


def test_type1_single_cell(tmp_path):
    config = _write_json(tmp_path / "t1.json", {
        "base": {"n": 150, "p": 10, "b": 1.0, "g": 1.0},
        "axes": {"gamma1": [2.0]},
        "methods": ["logrank", "double_1se"], "replicates": 1, "folds": 5})
    out = tmp_path / "t1.csv"
    assert main(["type1", "--config", config, "--out", str(out)]) == 0
    rows = _rows(out)
    assert [r["method"] for r in rows] == ["double_1se", "logrank"]
    assert all(r["replicates"] == "1" and r["gamma1"] == "2.0" for r in rows)


def test_type1_unknown_method(tmp_path, capsys):
    config = _write_json(tmp_path / "t1.json", {"methods": ["bootstrap"]})
    assert main(["type1", "--config", config]) == 2
    assert "unknown method" in capsys.readouterr().err


def test_bias_oracle_zero_effect(capsys):
    assert main(["bias-oracle", "--beta", "0", "--gamma1", "1", "--gamma2", "1",
                 "--mc-draws", "5000", "--t-steps", "200"]) == 0
    result = json.loads(capsys.readouterr().out)
    assert abs(result["estimate"]) <= 3 * result["mc_se"] + 1e-12
    assert result["beta"] == 0.0 and result["mc_draws"] == 5000


def test_curves_start_at_one(tmp_path):
    config = _write_json(tmp_path / "c.json", {
        "dgp": {"n": 150, "p": 10, "b": 0.8, "g": 1.6, "gamma1": 2.0},
        "replicates": 2, "timepoints": [0.0, 1.0], "folds": 5, "truth_draws": 1000})
    out = tmp_path / "c.csv"
    assert main(["curves", "--config", config, "--out", str(out)]) == 0
    rows = _rows(out)
    assert len(rows) == 2 * 3 * 2
    assert {r["mean"] for r in rows if r["time"] == "0.0"} == {"1.0"}


def _rerun_matches(command, out, tmp_path, jobs, extra=()):
    stamp = f"{out}.manifest.json"
    for j in jobs:
        again = tmp_path / f"rerun-{j}-{out.name}"
        assert main([command, *extra, "--config", stamp, "--jobs", str(j),
                     "--out", str(again)]) == 0
        assert again.read_bytes() == out.read_bytes()
        assert (tmp_path / f"{again.name}.manifest.json").read_bytes() == \
            (tmp_path / f"{out.name}.manifest.json").read_bytes()


def test_manifest_rerun_type1(tmp_path):
    config = _write_json(tmp_path / "t1.json", {
        "base": {"n": 120, "p": 10, "gamma1": 1.0},
        "axes": {"b": [0.0, 1.0], "g": [1.0]},
        "methods": ["post_lasso_1se", "logrank"], "replicates": 3, "folds": 5})
    out = tmp_path / "t1.csv"
    assert main(["type1", "--config", config, "--seed", "5", "--out", str(out)]) == 0
    _rerun_matches("type1", out, tmp_path, jobs=(1, 2))


def test_manifest_rerun_curves_and_simulate(tmp_path, trial_csv):
    config = _write_json(tmp_path / "c.json", {
        "dgp": {"n": 120, "p": 10, "b": 0.8, "g": 1.6, "gamma1": 2.0},
        "replicates": 3, "timepoints": [0.5, 1.0], "folds": 5, "truth_draws": 1000})
    out = tmp_path / "c.csv"
    assert main(["curves", "--config", config, "--out", str(out)]) == 0
    _rerun_matches("curves", out, tmp_path, jobs=(1, 2))
    _rerun_matches("simulate", trial_csv, tmp_path, jobs=(1,))


def test_manifest_rerun_analyze_and_oracle(tmp_path, trial_csv):
    out = tmp_path / "report.json"
    assert main(["analyze", str(trial_csv), "--folds", "10", "--out", str(out)]) == 0
    _rerun_matches("analyze", out, tmp_path, jobs=(1, 3))
    oracle = tmp_path / "oracle.json"
    assert main(["bias-oracle", "--beta", "0.5", "--mc-draws", "2000", "--t-steps", "100",
                 "--out", str(oracle)]) == 0
    _rerun_matches("bias-oracle", oracle, tmp_path, jobs=(2,))


def test_manifest_for_other_command_rejected(tmp_path, trial_csv):
    assert main(["type1", "--config", f"{trial_csv}.manifest.json"]) == 2


def test_method_order_does_not_change_rows(tmp_path):
    outputs = []
    for methods in (["logrank", "post_lasso_min"], ["post_lasso_min", "logrank"]):
        config = _write_json(tmp_path / "t1.json", {
            "base": {"n": 120, "p": 10, "b": 1.0, "g": 1.0, "gamma1": 1.0},
            "axes": {"gamma1": [1.0]}, "methods": methods, "replicates": 2, "folds": 5})
        out = tmp_path / f"order{len(outputs)}.csv"
        assert main(["type1", "--config", config, "--out", str(out)]) == 0
        outputs.append(out.read_bytes())
    assert outputs[0] == outputs[1]


def test_console_entry_point():
    result = subprocess.run([sys.executable, "-m", "censelect.cli", "--version"],
                            capture_output=True, text=True, check=True)
    assert result.stdout.startswith("censelect ")
