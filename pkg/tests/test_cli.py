import json

import numpy as np
import pytest

from covdeform import io
from covdeform.cli import main
from covdeform.experiment import load_config, run_checks, validate_config
from covdeform.grid import DeformationMap
from covdeform.kernel import build_nonstationary_cov, calibrate_unit_range
from covdeform.errors import ConfigError


def small_config(tmp_path, **fit):
    cfg = {
        "schema": "covdeform.experiment/1", "name": "small", "seed": 3,
        "scenario": {"grid": 9, "truth_rk4_steps": 64, "n_test_realizations": 10},
        "fit": {"max_iters": 60, **fit},
        "evaluate": {"grid_levels": 2, "grid_points": 9},
    }
    path = tmp_path / "small.json"
    path.write_text(json.dumps(cfg))
    return path


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0
    assert "simulate" in capsys.readouterr().out
    with pytest.raises(SystemExit) as e:
        main(["run", "--help"])
    assert e.value.code == 0


def test_pipeline_commands(tmp_path, capsys):
    cfg = small_config(tmp_path)
    data, fitdir = tmp_path / "data", tmp_path / "fit"
    assert main(["simulate", "--config", str(cfg), "--out", str(data)]) == 0
    assert main(["fit", "--config", str(cfg), "--data", str(data), "--out", str(fitdir), "--threads", "2"]) == 0
    model = fitdir / "model.json"
    assert main(["predict", "--config", str(cfg), "--model", str(model), "--tau", "0.3,-0.5",
                 "--out", str(tmp_path / "pred")]) == 0
    assert io.read_covariance_csv(tmp_path / "pred" / "covariance.csv").shape == (81, 81)
    assert main(["evaluate", "--config", str(cfg), "--model", str(model), "--data", str(data),
                 "--out", str(tmp_path / "eval")]) == 0
    summary = json.loads((tmp_path / "eval" / "scores_summary.json").read_text())
    assert summary["pairs"][0]["model_a"] == "predicted"
    assert main(["check", "--model", str(model), "--data", str(data), "--out", str(tmp_path / "chk")]) == 0
    assert (tmp_path / "chk" / "checks.json").is_file()
    assert "overall" in capsys.readouterr().out


def test_run_writes_artifacts(tmp_path):
    cfg = small_config(tmp_path)
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    for name in ("metrics.json", "run_info.json", "model.json", "trace.csv", "scores.csv", "checks.json",
                 "prediction/covariance.csv", "fields/field_1.csv", "dataset/manifest.json"):
        assert (out / name).is_file(), name
    m = json.loads((out / "metrics.json").read_text())
    assert m["runtime_seconds"] is None and len(m["field_rms_rel_err"]) == 2
    assert set(m["jacobian_min"]) == {"sample_1", "sample_2", "sample_3", "sample_4", "prediction"}


def test_zero_iterations_reproduce_baseline_covariance(tmp_path):
    cfg = small_config(tmp_path, max_iters=0)
    out = tmp_path / "run0"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    ds = io.ingest_dataset(out / "dataset")
    pred = io.read_covariance_csv(out / "prediction" / "covariance.csv")
    base = build_nonstationary_cov(ds.samples[0].f_emp, calibrate_unit_range())
    assert np.array_equal(pred, base.entries)


@pytest.mark.parametrize("argv", [["run", "--out", "x", "--seed", "-1"], ["run", "--out", "x", "--threads", "0"],
                                  ["predict", "--out", "x"]])
def test_bad_arguments_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_bad_config_exit_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"schema": "covdeform.experiment/1", "fit": {"max_iter": 5}}))
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "max_iter" in capsys.readouterr().err
    with pytest.raises(ConfigError):
        validate_config({"schema": "covdeform.experiment/1", "kernel": {"nu": 1.0}})


def test_missing_dataset_exit_3(tmp_path, capsys):
    assert main(["fit", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 3
    assert "[ingest]" in capsys.readouterr().err


def test_bundled_config_validates():
    cfg = load_config("simulation_study")
    assert cfg["scenario"]["grid"] == 33 and cfg["fit"]["max_iters"] == 2000


def test_checks_pass_for_true_model(noiseless_sim):
    sc, sim = noiseless_sim
    report = run_checks(sc.true_params(), sim.samples)
    assert report["passed"]
    assert all(j["min_det"] > 0 for j in report["jacobian"])
