"""Tests for the optimizers, EMA, clipping and the training loop."""

import logging
import math

import numpy as np
import pandas as pd
import pytest

from conftest import linear_model
from ebflow.architectures import build_from_config
from ebflow.config import TrainConfig
from ebflow.datasets import DataSource, build_oracle, parse_dataset
from ebflow.errors import ConfigError, ShapeError, TrainingDivergedError
from ebflow.evaluation import evaluate
from ebflow.tensor import Tensor
from ebflow.trainer import Adam, AdamW, EmaState, RMSProp, _trainable, clip_gradient, ema_update, train


def _small_config(**overrides):
    document = {
        "dataset": "sine",
        "M": 50,
        "architecture": "fc",
        "blocks": 2,
        "objective": "dsm",
        "sigma": 0.1,
        "batch_size": 32,
        "iterations": 4,
        "eval_every": 2,
        "eval_samples": 200,
        "checkpoint_every": 2,
        "seed": 5,
    }
    document.update(overrides)
    return TrainConfig.from_dict(document)


def _setup(config):
    spec = parse_dataset(config.dataset)
    oracle = build_oracle(spec, config.M, config.sigma_hat, np.random.default_rng([config.seed, 2]))
    model = build_from_config(config, spec.dim, np.random.default_rng([config.seed, 3]))
    return model, DataSource(spec, oracle, config.data_source, config.dequantize_scale), oracle


class NanSource:
    def batch(self, n, rng):
        return np.full((n, 2), np.nan)


def test_ema_update_examples():
    ema, theta = {"w": np.zeros(3)}, {"w": np.ones(3)}
    np.testing.assert_array_equal(ema_update(ema, theta, 0.0)["w"], np.ones(3))
    np.testing.assert_array_equal(ema_update(ema, theta, 1.0)["w"], np.zeros(3))
    np.testing.assert_allclose(ema_update(ema, theta, 0.999)["w"], np.full(3, 0.001))


def test_ema_update_rejects_mismatched_shapes():
    with pytest.raises(ShapeError):
        ema_update({"w": np.zeros(3)}, {"w": np.zeros(2)}, 0.5)
    with pytest.raises(ShapeError):
        ema_update({"w": np.zeros(3)}, {"v": np.zeros(3)}, 0.5)


def test_ema_momentum_one_warns(caplog):
    with caplog.at_level(logging.WARNING):
        EmaState({"w": np.zeros(2)}, momentum=1.0)
    assert "never move" in caplog.text


def test_clip_gradient_examples():
    grads = {"a": np.array([3.0, 4.0])}
    clipped, norm = clip_gradient(grads, 10.0)
    assert norm == 5.0
    np.testing.assert_array_equal(clipped["a"], [3.0, 4.0])
    clipped, norm = clip_gradient({"a": np.array([12.0, 16.0])}, 10.0)
    assert norm == 20.0
    assert np.linalg.norm(clipped["a"]) == pytest.approx(10.0)
    clipped, _ = clip_gradient({"a": np.array([120.0, 160.0])}, None)
    np.testing.assert_array_equal(clipped["a"], [120.0, 160.0])


def test_clip_gradient_uses_the_global_norm():
    clipped, norm = clip_gradient({"a": np.array([3.0]), "b": np.array([4.0])}, 1.0)
    assert norm == 5.0
    assert clipped["a"][0] == pytest.approx(0.6)
    assert clipped["b"][0] == pytest.approx(0.8)


def test_adam_first_step_has_learning_rate_size():
    param = {"w": Tensor([1.0, -1.0])}
    Adam(0.1).step(param, {"w": np.array([5.0, -0.01])})
    np.testing.assert_allclose(param["w"].data, [0.9, -0.9], atol=1e-6)


def test_adamw_decays_weights_without_gradient():
    param = {"w": Tensor([2.0])}
    AdamW(0.1, weight_decay=0.5).step(param, {"w": np.array([0.0])})
    assert param["w"].data[0] == pytest.approx(2.0 * (1.0 - 0.05))


def test_rmsprop_step():
    param = {"w": Tensor([0.0])}
    RMSProp(0.01).step(param, {"w": np.array([2.0])})
    assert param["w"].data[0] == pytest.approx(-0.01 * 2.0 / (math.sqrt(0.01 * 4.0) + 1e-8))


def test_learning_rate_must_be_positive():
    with pytest.raises(ValueError):
        Adam(0.0)


def test_zero_iterations_returns_initial_state(tmp_path):
    config = _small_config(iterations=0)
    model, source, oracle = _setup(config)
    before = model.parameter_arrays()
    state = train(model, source, config, oracle=oracle, out_dir=tmp_path)
    assert state.step == 0 and state.losses == []
    for name, value in model.parameter_arrays().items():
        np.testing.assert_array_equal(value, before[name])
    assert (tmp_path / "checkpoints" / "step_000000.ebf").exists()
    assert not (tmp_path / "final.ebf").exists()


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        config = _small_config()
        model, source, oracle = _setup(config)
        state = train(model, source, config, oracle=oracle)
        runs.append((state.losses, model.parameter_arrays()))
    assert runs[0][0] == runs[1][0]
    for name, value in runs[0][1].items():
        np.testing.assert_array_equal(value, runs[1][1][name])


def test_training_writes_metrics_and_checkpoints(tmp_path):
    config = _small_config(log_wall_time=True)
    model, source, oracle = _setup(config)
    state = train(model, source, config, oracle=oracle, out_dir=tmp_path)
    frame = pd.read_csv(tmp_path / "metrics.csv")
    assert list(frame.columns) == ["step", "loss", "grad_norm", "kl", "fisher", "wall_ms"]
    assert frame["step"].tolist() == [2, 4]
    assert frame["kl"].notna().all() and frame["fisher"].notna().all()
    assert len(state.metrics_frame()) == 2
    assert len(state.grad_norms) == config.iterations
    for name in ("checkpoints/step_000002.ebf", "checkpoints/step_000004.ebf", "final.ebf", "final_ema.ebf"):
        assert (tmp_path / name).exists(), f"missing {name}"
    assert state.last_checkpoint == tmp_path / "checkpoints" / "step_000004.ebf"


def test_divergence_reports_step_and_last_checkpoint(tmp_path):
    config = _small_config()
    model, _, _ = _setup(config)
    with pytest.raises(TrainingDivergedError) as info:
        train(model, NanSource(), config, out_dir=tmp_path)
    assert info.value.step == 1
    assert info.value.checkpoint.endswith("step_000000.ebf")


def test_map_k_must_match_the_model():
    config = _small_config(map_k=1, logit_range=[-3.0, 3.0], data_source="dequantized")
    model, source, oracle = _setup(_small_config())
    with pytest.raises(ValueError, match="map_k"):
        train(model, source, config, oracle=oracle)


def test_map_training_freezes_the_preprocess_layers():
    config = _small_config(map_k=1, logit_range=[-3.5, 3.5], data_source="dequantized", objective="ml", sigma=None)
    model, source, oracle = _setup(config)
    assert list(_trainable(model, 1)) == [name for name in model.parameters() if not name.startswith("layers.0.")]
    state = train(model, source, config, oracle=oracle)
    assert all(math.isfinite(loss) for loss in state.losses)
    assert state.step == config.iterations


def test_identity_flow_on_prior_data_stays_put():
    config = TrainConfig.from_dict(
        {"dataset": "gauss-2", "objective": "ml", "batch_size": 5000, "iterations": 20, "eval_every": 20, "eval_samples": 0, "seed": 1}
    )
    spec = parse_dataset(config.dataset)
    oracle = build_oracle(spec, config.M, config.sigma_hat, np.random.default_rng(0))
    model = linear_model(np.eye(2))
    state = train(model, DataSource(spec, oracle), config)
    entropy = math.log(2.0 * math.pi) + 1.0
    assert abs(np.mean(state.losses) - entropy) < 0.05, f"mean loss {np.mean(state.losses)} vs entropy {entropy}"
    drift = np.abs(model.parameters()["layers.0.W"].data - np.eye(2)).max()
    assert drift < 20 * config.lr + 1e-12, f"weights drifted by {drift}"


def test_logit_range_needs_bounded_data():
    with pytest.raises(ConfigError, match="dequantized"):
        _small_config(logit_range=[-3.0, 3.0])
    with pytest.raises(ConfigError, match="does not cover"):
        _small_config(logit_range=[-2.0, 2.0], data_source="dequantized")
    with pytest.raises(ConfigError, match="unbounded"):
        _small_config(dataset="gauss-2", logit_range=[-5.0, 5.0], data_source="dequantized")
    config = _small_config(logit_range=[-2.1, 2.1], data_source="dequantized")
    assert config.logit_range == (-2.1, 2.1)


def test_skipped_evaluation_is_warned(caplog):
    config = _small_config(iterations=2, map_k=1, logit_range=[-2.1, 2.1], data_source="dequantized")
    model, source, oracle = _setup(config)
    with caplog.at_level(logging.WARNING):
        state = train(model, source, config, oracle=oracle)
    assert "evaluation skipped" in caplog.text
    assert math.isnan(state.metrics[-1]["kl"])


def _median_grad_norm(config):
    model, source, oracle = _setup(config)
    state = train(model, source, config, oracle=oracle)
    return float(np.median(state.grad_norms))


def _ema_report(config):
    model, source, oracle = _setup(config)
    state = train(model, source, config, oracle=oracle)
    with model.swapped_parameters(state.ema.shadow):
        return evaluate(oracle, model, method="quadrature")


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_map_lowers_the_median_gradient_norm(seed):
    base = {
        "architecture": "glow",
        "blocks": 2,
        "objective": "ssm",
        "sigma": None,
        "data_source": "dequantized",
        "logit_range": [-2.1, 2.1],
        "batch_size": 256,
        "iterations": 500,
        "eval_every": 500,
        "eval_samples": 0,
        "checkpoint_every": 500,
        "seed": seed,
    }
    with_map = _median_grad_norm(_small_config(**base, map_k=1))
    without_map = _median_grad_norm(_small_config(**base, map_k=0))
    assert with_map < without_map, f"median gradient norm {with_map} with MaP vs {without_map} without"


@pytest.mark.slow
def test_sliced_score_matching_matches_likelihood_on_sine():
    base = {
        "M": 2000,
        "architecture": "glow",
        "blocks": 10,
        "sigma": None,
        "batch_size": 1000,
        "iterations": 10_000,
        "eval_every": 10_000,
        "eval_samples": 0,
        "checkpoint_every": 10_000,
        "seed": 0,
    }
    ml = _ema_report(_small_config(**base, objective="ml"))
    ssm = _ema_report(_small_config(**base, objective="ssm"))
    assert ssm.kl <= 1.05 * ml.kl, f"SSM KL {ssm.kl} vs ML KL {ml.kl}"
    assert ssm.fisher < ml.fisher, f"SSM Fisher {ssm.fisher} vs ML Fisher {ml.fisher}"


@pytest.mark.slow
def test_denoising_fisher_shrinks_with_the_noise_level():
    mean_fisher = []
    for sigma in (1.0, 0.5, 0.25):
        reports = [
            _ema_report(
                _small_config(
                    architecture="glow",
                    blocks=4,
                    sigma=sigma,
                    lr=1e-3,
                    batch_size=500,
                    iterations=2000,
                    eval_every=2000,
                    eval_samples=0,
                    checkpoint_every=2000,
                    ema_momentum=0.99,
                    seed=seed,
                )
            )
            for seed in (0, 1, 2)
        ]
        mean_fisher.append(float(np.mean([report.fisher for report in reports])))
    assert mean_fisher[0] >= mean_fisher[1] >= mean_fisher[2], f"mean Fisher by sigma 1.0, 0.5, 0.25: {mean_fisher}"
