"""Tests for the flow model, its energy factorization and checkpoints."""

import math

import numpy as np
import pytest

from ebflow import tensor as T
from ebflow.architectures import build_glow
from ebflow.checkpoint import checkpoint_digest, load_checkpoint, manifest_path, read_manifest, save_checkpoint
from ebflow.errors import CheckpointError, EBFlowError, InversionError
from ebflow.evaluation import partition_by_quadrature
from ebflow.flow import FlowModel
from ebflow.layers import Actnorm, AffineCoupling, FullyConnected, LogitPreprocess, SmoothLeakyReLU
from ebflow.tensor import Tape, Tensor

LOG_2PI = math.log(2.0 * math.pi)


def _perturbed_glow(rng, dim=2, blocks=2, logit_range=None, map_k=0):
    model = build_glow(dim, blocks=blocks, hidden=8, rng=rng, logit_range=logit_range, map_k=map_k)
    for layer in model.layers:
        if isinstance(layer, AffineCoupling):
            for net in ("s", "t"):
                layer.params[f"{net}.W3"].data = 0.2 * rng.standard_normal(layer.params[f"{net}.W3"].shape)
        if isinstance(layer, Actnorm):
            layer.params["gamma"].data = rng.uniform(0.5, 1.5, dim)
            layer.params["beta"].data = 0.1 * rng.standard_normal(dim)
    model.mark_updated()
    return model


def _compact_model(rng):
    q, _ = np.linalg.qr(rng.standard_normal((2, 2)))
    return FlowModel(
        [
            FullyConnected(2, weight=np.diag([2.0, 1.5]), bias=np.array([0.1, -0.2])),
            SmoothLeakyReLU(2, alpha=0.5),
            FullyConnected(2, weight=q, bias=np.zeros(2)),
        ]
    )


def test_energy_examples(identity_model):
    assert identity_model.energy([0.0, 0.0]).item() == pytest.approx(1.837877, abs=1e-6)
    assert FlowModel([SmoothLeakyReLU(2, alpha=1.0)]).energy([0.0, 0.0]).item() == pytest.approx(LOG_2PI)
    actnorm_first = FlowModel([Actnorm(2, gamma=[2.0, 2.0]), FullyConnected(2, weight=np.eye(2))])
    assert actnorm_first.energy([0.0, 0.0]).item() == pytest.approx(LOG_2PI)


def test_log_partition_examples(diag24_model):
    assert FlowModel([SmoothLeakyReLU(2)]).log_partition() == 0.0
    assert diag24_model.log_partition() == pytest.approx(-2.079442, abs=1e-6)
    actnorm = FlowModel([Actnorm(2, gamma=[0.5, 0.5])])
    assert actnorm.log_partition() == pytest.approx(-math.log(4.0))


def test_log_prob_examples(identity_model, diag24_model):
    assert identity_model.log_prob([0.0, 0.0]).item() == pytest.approx(-LOG_2PI)
    assert identity_model.log_prob([1.0, 1.0]).item() == pytest.approx(-LOG_2PI - 1.0)
    assert diag24_model.log_prob([0.0, 0.0]).item() == pytest.approx(-LOG_2PI + math.log(8.0))


def test_score_examples(identity_model, diag21_model):
    np.testing.assert_allclose(identity_model.score([1.0, 2.0]).data, [[-1.0, -2.0]])
    np.testing.assert_allclose(identity_model.score([0.0, 0.0]).data, [[0.0, 0.0]])
    np.testing.assert_allclose(diag21_model.score([1.0, 0.0]).data, [[-4.0, 0.0]])


def test_factorization_matches_change_of_variables(rng):
    model = _perturbed_glow(rng, dim=3, blocks=3)
    x = rng.standard_normal((40, 3))
    with T.no_grad():
        factored = model.log_prob(x).data
        direct = model.log_prob_direct(x).data
    np.testing.assert_allclose(factored, direct, atol=1e-10)


def test_factorization_with_logit_preprocess(rng):
    model = _perturbed_glow(rng, dim=2, blocks=2, logit_range=(-3.0, 3.0), map_k=1)
    x = rng.uniform(-2.5, 2.5, (30, 2))
    with T.no_grad():
        np.testing.assert_allclose(model.log_prob(x).data, model.log_prob_direct(x).data, atol=1e-10)


def test_partition_matches_quadrature(rng):
    model = _compact_model(rng)
    integral = partition_by_quadrature(model)
    expected = math.exp(model.log_partition())
    assert expected == pytest.approx(1.0 / 3.0)
    assert integral == pytest.approx(expected, rel=1e-4), f"quadrature {integral} vs exp(log Z) {expected}"


def test_energy_never_factorizes_weights(rng):
    model = _perturbed_glow(rng, dim=2, blocks=2)
    x = Tensor(rng.standard_normal((5, 2)), requires_grad=True)
    with Tape() as tape:
        model.energy_gradient(x, create_graph=True)
    assert "slogdet" not in tape, f"energy touched slogdet: {tape.op_counts()}"
    with Tape() as tape:
        model.log_partition_tensor()
    assert tape.op_counts()["slogdet"] == 2


def test_log_partition_cache_follows_updates(diag24_model):
    assert diag24_model.log_partition() == pytest.approx(-math.log(8.0))
    diag24_model.parameters()["layers.0.W"].data = np.diag([1.0, 1.0])
    assert diag24_model.log_partition() == pytest.approx(-math.log(8.0)), "cache should hold until marked"
    diag24_model.mark_updated()
    assert diag24_model.log_partition() == pytest.approx(0.0)


def test_swapped_parameters_restore(diag24_model):
    shadow = {"layers.0.W": np.eye(2), "layers.0.b": np.ones(2)}
    with diag24_model.swapped_parameters(shadow):
        assert diag24_model.log_partition() == pytest.approx(0.0)
    assert diag24_model.log_partition() == pytest.approx(-math.log(8.0))
    np.testing.assert_array_equal(diag24_model.parameters()["layers.0.b"].data, np.zeros(2))


def test_energy_report(diag24_model):
    report = diag24_model.energy_report([0.0, 0.0])
    assert report.energy == pytest.approx(LOG_2PI)
    assert report.log_z == pytest.approx(-math.log(8.0))
    assert report.logp == pytest.approx(-LOG_2PI + math.log(8.0))
    assert diag24_model.energy_report([0.0, 0.0], with_partition=False).log_z is None


def test_map_split_examples():
    layers = [LogitPreprocess(2, 0.0, 1.0), FullyConnected(2), SmoothLeakyReLU(2), FullyConnected(2)]
    preprocess, head = FlowModel(layers, map_k=1).map_split()
    assert preprocess.layers == layers[:1]
    assert head.layers == layers[1:]
    _, last = FlowModel(layers, map_k=3).map_split()
    assert len(last) == 1
    with pytest.raises(EBFlowError, match="MaP requested with no preprocess layers"):
        FlowModel(layers).map_split()


def test_map_split_views_follow_parent_updates():
    layers = [Actnorm(2, beta=[0.0, 0.0], gamma=[1.0, 1.0]), FullyConnected(2, weight=np.diag([2.0, 4.0]), bias=np.zeros(2))]
    model = FlowModel(layers, map_k=1)
    _, head = model.map_split()
    assert head.log_partition() == pytest.approx(-math.log(8.0))
    values = model.parameter_arrays()
    values["layers.1.W"] = np.eye(2)
    model.load_parameter_arrays(values)
    assert model.log_partition() == pytest.approx(0.0, abs=1e-15)
    assert head.log_partition() == pytest.approx(0.0, abs=1e-15)
    head.parameters()["layers.0.W"].data = np.diag([3.0, 1.0])
    head.mark_updated()
    assert model.log_partition() == pytest.approx(-math.log(3.0))


def test_map_k_must_leave_a_head():
    with pytest.raises(ValueError):
        FlowModel([FullyConnected(2)], map_k=1)


def test_sample_covariance(diag24_model):
    samples = diag24_model.sample(100_000, np.random.default_rng(7))
    cov = np.cov(samples.T)
    np.testing.assert_allclose(np.diag(cov), [0.25, 0.0625], rtol=0.02)
    assert abs(cov[0, 1]) < 0.003


def test_inverse_reports_failing_layer():
    model = FlowModel([FullyConnected(2, weight=np.eye(2)), FullyConnected(2, weight=np.zeros((2, 2)))])
    with pytest.raises(InversionError) as info:
        model.inverse(np.zeros((1, 2)))
    assert info.value.layer_index == 1


def test_initialize_only_touches_fresh_actnorm(rng):
    model = FlowModel([Actnorm(2), FullyConnected(2, weight=np.eye(2)), Actnorm(2, gamma=[3.0, 3.0], initialized=True)])
    model.initialize(rng.normal(5.0, 2.0, (200, 2)))
    assert model.layers[0].initialized
    np.testing.assert_array_equal(model.layers[2].params["gamma"].data, [3.0, 3.0])


def test_checkpoint_round_trip(tmp_path, rng):
    model = _perturbed_glow(rng, dim=2, blocks=2, logit_range=(-4.0, 4.0), map_k=1)
    path = save_checkpoint(model, tmp_path / "model.ebf", seed=11)
    restored, info = load_checkpoint(path)
    assert restored.map_k == 1
    assert info["manifest"] == {"map_k": "1", "prior": "standard_normal", "seed": "11"}
    assert [layer.kind for layer in restored.layers] == [layer.kind for layer in model.layers]
    x = rng.uniform(-3.0, 3.0, (20, 2))
    with T.no_grad():
        np.testing.assert_array_equal(restored.log_prob(x).data, model.log_prob(x).data)
    assert read_manifest(path)["prior"] == "standard_normal"
    assert manifest_path(path).name == "model.ebf.manifest.txt"


def test_checkpoint_with_shadow_parameters(tmp_path, diag24_model):
    shadow = {"layers.0.W": np.eye(2), "layers.0.b": np.zeros(2)}
    path = save_checkpoint(diag24_model, tmp_path / "ema.ebf", parameters=shadow)
    restored, _ = load_checkpoint(path)
    assert restored.log_partition() == pytest.approx(0.0)
    assert checkpoint_digest(path) == checkpoint_digest(path)


def test_checkpoint_errors(tmp_path, diag24_model):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ebf")
    bogus = tmp_path / "bogus.ebf"
    bogus.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(bogus)
    path = save_checkpoint(diag24_model, tmp_path / "cut.ebf")
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
