"""Tests for the invertible layers."""

import math

import numpy as np
import pytest

from ebflow import tensor as T
from ebflow.errors import DomainError, SingularMatrixError
from ebflow.layers import (
    Actnorm,
    AffineCoupling,
    FullyConnected,
    LayerKind,
    LogitPreprocess,
    SmoothLeakyReLU,
    layer_from_config,
)
from ebflow.tensor import Tensor


def _perturbed_coupling(dim, parity, rng):
    layer = AffineCoupling(dim, hidden=8, parity=parity, rng=rng)
    for net in ("s", "t"):
        layer.params[f"{net}.W3"].data = 0.3 * rng.standard_normal(layer.params[f"{net}.W3"].shape)
        layer.params[f"{net}.b3"].data = 0.1 * rng.standard_normal(layer.params[f"{net}.b3"].shape)
    return layer


def _layers(rng, dim=3):
    return {
        "actnorm": Actnorm(dim, beta=rng.standard_normal(dim), gamma=rng.uniform(0.5, 2.0, dim) * rng.choice([-1, 1], dim)),
        "fully_connected": FullyConnected(dim, weight=rng.standard_normal((dim, dim)) + 2.0 * np.eye(dim), bias=rng.standard_normal(dim)),
        "smooth_leaky_relu": SmoothLeakyReLU(dim, alpha=0.3),
        "coupling_even": _perturbed_coupling(dim, 0, rng),
        "coupling_odd": _perturbed_coupling(dim, 1, rng),
        "logit": LogitPreprocess(dim, lo=-4.0, hi=4.0),
    }


def test_actnorm_identity_parameters():
    out = Actnorm(2).forward(Tensor([[1.0, 2.0]]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


def test_smooth_leaky_relu_at_zero():
    out = SmoothLeakyReLU(2, alpha=0.3).forward(Tensor([[0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[0.485203, 0.485203]], atol=1e-6)


def test_fully_connected_forward():
    layer = FullyConnected(2, weight=np.diag([2.0, 3.0]), bias=np.zeros(2))
    np.testing.assert_array_equal(layer.forward(Tensor([[1.0, 1.0]])).data, [[2.0, 3.0]])


def test_inverse_examples():
    actnorm = Actnorm(2, beta=[1.0, 1.0], gamma=[2.0, 2.0])
    np.testing.assert_allclose(actnorm.inverse(np.zeros((1, 2))), [[1.0, 1.0]])
    fc = FullyConnected(2, weight=np.eye(2), bias=np.array([5.0, 5.0]))
    np.testing.assert_allclose(fc.inverse(np.zeros((1, 2))), [[-5.0, -5.0]])
    z = np.array([[0.3, -7.0]])
    np.testing.assert_array_equal(SmoothLeakyReLU(2, alpha=1.0).inverse(z), z)


def test_log_det_examples():
    actnorm = Actnorm(2, gamma=[0.5, 0.5])
    assert actnorm.log_abs_det().item() == pytest.approx(1.386294, abs=1e-6)
    slrelu = SmoothLeakyReLU(2, alpha=0.3).log_abs_det_jacobian(Tensor([[0.0, 0.0]]))
    assert slrelu.data[0] == pytest.approx(-0.861564, abs=1e-6)
    fc = FullyConnected(2, weight=np.eye(2))
    assert fc.log_abs_det().item() == 0.0


def test_set_membership():
    rng = np.random.default_rng(0)
    tags = {name: layer.set_tag for name, layer in _layers(rng).items()}
    assert tags == {
        "actnorm": "S_l",
        "fully_connected": "S_l",
        "smooth_leaky_relu": "S_n",
        "coupling_even": "S_n",
        "coupling_odd": "S_n",
        "logit": "S_n",
    }, f"unexpected set tags {tags}"


@pytest.mark.parametrize("name", ["actnorm", "fully_connected", "smooth_leaky_relu", "coupling_even", "coupling_odd", "logit"])
def test_round_trip(name, rng):
    layer = _layers(rng)[name]
    y = rng.uniform(-3.0, 3.0, (50, 3))
    with T.no_grad():
        z = layer.forward(Tensor(y)).data
    recovered = layer.inverse(z)
    np.testing.assert_allclose(recovered, y, atol=1e-8, err_msg=f"{name} did not invert")


@pytest.mark.parametrize("name", ["actnorm", "fully_connected", "smooth_leaky_relu", "coupling_even", "coupling_odd", "logit"])
def test_log_det_matches_jacobian(name, rng):
    layer = _layers(rng)[name]
    for y in rng.uniform(-3.0, 3.0, (5, 3)):
        jac = T.jacobian(layer.forward, y)
        _, expected = np.linalg.slogdet(jac)
        actual = layer.log_abs_det_jacobian(Tensor(y.reshape(1, -1))).data[0]
        assert actual == pytest.approx(expected, abs=1e-9), f"{name} log det {actual} != {expected}"


@pytest.mark.parametrize("name", ["actnorm", "fully_connected"])
def test_linear_log_det_does_not_depend_on_input(name, rng):
    layer = _layers(rng)[name]
    values = layer.log_abs_det_jacobian(Tensor(rng.standard_normal((20, 3)) * 10.0)).data
    assert np.ptp(values) == 0.0, f"{name} log det varies across inputs"


def test_smooth_leaky_relu_inverts_extreme_values():
    layer = SmoothLeakyReLU(4, alpha=0.05)
    y = np.array([[-200.0, -20.0, 20.0, 200.0]])
    with T.no_grad():
        z = layer.forward(Tensor(y)).data
    np.testing.assert_allclose(layer.inverse(z), y, rtol=1e-9)


def test_smooth_leaky_relu_rejects_bad_alpha():
    with pytest.raises(ValueError):
        SmoothLeakyReLU(2, alpha=0.0)


def test_coupling_starts_as_identity(rng):
    layer = AffineCoupling(5, hidden=4, parity=1, rng=rng)
    y = rng.standard_normal((6, 5))
    z, ldj = layer.transform(Tensor(y))
    np.testing.assert_allclose(z.data, y)
    np.testing.assert_array_equal(ldj.data, np.zeros(6))


def test_coupling_leaves_conditioning_half_untouched(rng):
    layer = _perturbed_coupling(5, 0, rng)
    y = rng.standard_normal((4, 5))
    z = layer.forward(Tensor(y)).data
    np.testing.assert_array_equal(z[:, 3:], y[:, 3:])
    assert not np.allclose(z[:, :3], y[:, :3])


def test_actnorm_zero_gamma_is_singular():
    layer = Actnorm(3, gamma=[1.0, 0.0, 1.0])
    with pytest.raises(SingularMatrixError) as info:
        layer.log_abs_det()
    assert info.value.pivot_index == 1


def test_actnorm_initialization_standardizes(rng):
    batch = rng.normal(3.0, 2.5, (500, 2))
    layer = Actnorm(2)
    layer.initialize(batch)
    with T.no_grad():
        z = layer.forward(Tensor(batch)).data
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-12)
    assert layer.initialized


def test_fully_connected_singular_inverse():
    layer = FullyConnected(2, weight=np.zeros((2, 2)))
    with pytest.raises(SingularMatrixError):
        layer.inverse(np.zeros((1, 2)))


def test_logit_domain_violation_names_coordinate():
    layer = LogitPreprocess(2, lo=0.0, hi=1.0)
    with pytest.raises(DomainError) as info:
        layer.forward(Tensor([[0.5, 1.2]]))
    assert info.value.coordinate == 1
    assert info.value.bound == "< 1.0"


def test_logit_midpoint_maps_to_zero():
    layer = LogitPreprocess(3, lo=-2.0, hi=2.0)
    out = layer.forward(Tensor(np.zeros((1, 3)))).data
    np.testing.assert_allclose(out, 0.0, atol=1e-15)
    expected = 3.0 * (math.log(4.0) + math.log((1.0 - 2.0 * 1e-2) / 4.0))
    assert layer.log_abs_det_jacobian(Tensor(np.zeros((1, 3)))).data[0] == pytest.approx(expected)


@pytest.mark.parametrize("name", ["actnorm", "fully_connected", "smooth_leaky_relu", "coupling_even", "logit"])
def test_rebuild_from_config(name, rng):
    layer = _layers(rng)[name]
    params = {key: p.data.copy() for key, p in layer.params.items()}
    rebuilt = layer_from_config(layer.kind.value, layer.config(), params)
    y = rng.uniform(-3.0, 3.0, (10, 3))
    with T.no_grad():
        np.testing.assert_array_equal(rebuilt.forward(Tensor(y)).data, layer.forward(Tensor(y)).data)
    assert rebuilt.kind == LayerKind(layer.kind.value)
