"""End-to-end tests of the command-line entry point."""

import json

import pandas as pd
import pytest

from ebflow.cli import EXIT_ERROR, EXIT_OK, main

SMALL_RUN = {
    "dataset": "sine",
    "M": 40,
    "architecture": "fc",
    "blocks": 2,
    "objective": "dsm",
    "sigma": 0.1,
    "batch_size": 16,
    "iterations": 2,
    "eval_every": 1,
    "eval_samples": 100,
    "checkpoint_every": 1,
}


def _write_config(tmp_path, **overrides):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({**SMALL_RUN, **overrides}))
    return str(path)


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    config = _write_config(root)
    code = main(["train", "--config", config, "--out", str(root / "out"), "--seed", "3"])
    assert code == EXIT_OK, f"train exited with {code}"
    return root / "out"


def test_train_writes_run_artifacts(trained_run):
    manifest = json.loads((trained_run / "manifest.json").read_text())
    assert manifest["status"] == "success"
    assert manifest["seed"] == 3
    assert manifest["config"]["objective"] == "dsm"
    assert manifest["finished_at"] is not None
    assert len(manifest["checkpoint_sha256"]) == 64
    for artifact in ("metrics.csv", "final.ebf", "final_ema.ebf", "checkpoints/step_000000.ebf"):
        assert artifact in manifest["artifacts"], f"{artifact} not listed"
    assert len(pd.read_csv(trained_run / "metrics.csv")) == 2


def test_eval_writes_report_and_densities(trained_run, tmp_path):
    out = tmp_path / "eval"
    code = main(
        ["eval", "--checkpoint", str(trained_run / "final_ema.ebf"), "--dataset", "sine",
         "--samples", "500", "--M", "40", "--out", str(out)]
    )
    assert code == EXIT_OK
    report = pd.read_csv(out / "report.csv")
    assert report["method"].iloc[0] == "monte-carlo"
    for name in ("model_density.pgm", "model_density.csv", "oracle_density.pgm", "oracle_density.csv"):
        assert (out / name).exists(), f"missing {name}"


def test_eval_rejects_mismatched_dimension(trained_run, tmp_path):
    code = main(["eval", "--checkpoint", str(trained_run / "final.ebf"), "--dataset", "gauss-3", "--out", str(tmp_path)])
    assert code == EXIT_ERROR


def test_sample_command(trained_run, tmp_path):
    code = main(["sample", "--checkpoint", str(trained_run / "final.ebf"), "-n", "25", "--out", str(tmp_path)])
    assert code == EXIT_OK
    frame = pd.read_csv(tmp_path / "samples.csv")
    assert frame.shape == (25, 2)


def test_zest_command(trained_run, tmp_path):
    code = main(["zest", "--checkpoint", str(trained_run / "final.ebf"), "--samples", "300", "--out", str(tmp_path)])
    assert code == EXIT_OK
    frame = pd.read_csv(tmp_path / "zest.csv")
    assert list(frame.columns) == ["estimate", "stderr", "M_is", "D", "log_z", "log_z_exact"]
    assert frame["M_is"].iloc[0] == 300


def test_impute_command(trained_run, tmp_path):
    code = main(
        ["impute", "--checkpoint", str(trained_run / "final.ebf"), "--observed", "0.5,nan",
         "--chains", "3", "--iterations", "20", "--thin", "10", "--out", str(tmp_path)]
    )
    assert code == EXIT_OK
    frame = pd.read_csv(tmp_path / "trajectory.csv")
    assert frame["iter"].tolist() == [10, 10, 10, 20, 20, 20]
    assert (frame["x0"] == 0.5).all()


def test_bench_command(tmp_path):
    code = main(
        ["bench", "--objectives", "ml,dsm", "--dims", "4,8", "--reps", "2", "--warmup", "0",
         "--batch-size", "4", "--out", str(tmp_path)]
    )
    assert code == EXIT_OK
    frame = pd.read_csv(tmp_path / "bench.csv")
    assert sorted(frame["objective"].unique()) == ["dsm", "ml"]
    assert len(frame) == 4


def test_zero_iterations_writes_only_the_initial_checkpoint(tmp_path):
    out = tmp_path / "out"
    code = main(["train", "--config", _write_config(tmp_path), "--iterations", "0", "--out", str(out)])
    assert code == EXIT_OK
    assert (out / "checkpoints" / "step_000000.ebf").exists()
    assert not (out / "final.ebf").exists()
    assert json.loads((out / "manifest.json").read_text())["status"] == "success"


def test_dsm_without_sigma_is_a_config_error(tmp_path, caplog):
    code = main(["train", "--config", _write_config(tmp_path, sigma=None), "--out", str(tmp_path / "out")])
    assert code == EXIT_ERROR
    assert "sigma" in caplog.text


def test_unknown_config_key_lists_valid_keys(tmp_path, caplog):
    code = main(["train", "--config", _write_config(tmp_path, learning_rate=0.1), "--out", str(tmp_path / "out")])
    assert code == EXIT_ERROR
    assert "learning_rate" in caplog.text
    assert "valid keys" in caplog.text


def test_missing_checkpoint_exits_with_error(tmp_path):
    code = main(["sample", "--checkpoint", str(tmp_path / "nope.ebf"), "--out", str(tmp_path)])
    assert code == EXIT_ERROR


def test_repeated_runs_write_identical_metrics(tmp_path):
    config = _write_config(tmp_path, iterations=100, eval_every=10, eval_samples=100, checkpoint_every=50)
    outputs = []
    for name in ("first", "second"):
        code = main(["train", "--config", config, "--out", str(tmp_path / name), "--seed", "11"])
        assert code == EXIT_OK
        outputs.append((tmp_path / name / "metrics.csv").read_bytes())
    assert outputs[0] == outputs[1]
    assert len(pd.read_csv(tmp_path / "first" / "metrics.csv")) == 10
