"""Shared fixtures: seeded generators, hand-set models and a finite-difference helper."""

from typing import Callable

import numpy as np
import pytest

from ebflow.flow import FlowModel
from ebflow.layers import FullyConnected


def linear_model(weight, bias=None) -> FlowModel:
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.zeros(len(weight)) if bias is None else np.asarray(bias, dtype=np.float64)
    return FlowModel([FullyConnected(len(weight), weight=weight, bias=bias)])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def identity_model():
    return linear_model(np.eye(2))


@pytest.fixture
def diag24_model():
    return linear_model(np.diag([2.0, 4.0]))


@pytest.fixture
def diag21_model():
    return linear_model(np.diag([2.0, 1.0]))


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    for index in np.ndindex(x.shape):
        step = np.zeros_like(x)
        step[index] = h
        out[index] = (f(x + step) - f(x - step)) / (2.0 * h)
    return out


@pytest.fixture
def numeric_grad():
    return central_difference
