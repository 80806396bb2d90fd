"""Training objectives.

Each loss maps a batch of shape (N, D) to a scalar tensor on the tape and
reports its terms. Only ``loss_ml`` touches the linear-layer determinants;
the score-based losses and SML work on the energy alone.
"""

import logging
from typing import Dict, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ebflow import tensor as T
from ebflow.config import ObjectiveConfig, ObjectiveKind, Projection
from ebflow.flow import FlowModel
from ebflow.tensor import Tensor

logger = logging.getLogger(__name__)


class LossReport(BaseModel):
    """A differentiable loss with its breakdown"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    loss: Tensor = Field(description="Scalar loss on the tape")
    terms: Dict[str, float] = Field(default_factory=dict, description="Named terms of the loss")
    n: int = Field(description="Batch size")

    @property
    def value(self) -> float:
        return self.loss.item()


def _batch(batch) -> np.ndarray:
    data = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float64)
    return data.reshape(1, -1) if data.ndim == 1 else data


def draw_projections(
    n_v: int, n: int, d: int, projection: Projection, rng: np.random.Generator
) -> np.ndarray:
    """Hutchinson projections with E[v v^T] = I, shape (n_v, N, D)."""
    if projection == Projection.RADEMACHER:
        return rng.choice(np.array([-1.0, 1.0]), size=(n_v, n, d))
    return rng.standard_normal((n_v, n, d))


def draw_sphere(n: int, d: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform on the sphere of the given radius."""
    z = rng.standard_normal((n, d))
    return radius * z / np.linalg.norm(z, axis=1, keepdims=True)


def loss_ml(model: FlowModel, batch) -> LossReport:
    """Mean negative log-likelihood, assembled as mean E(x) + log Z."""
    x = _batch(batch)
    energy = T.mean(model.energy(x))
    log_z = model.log_partition_tensor()
    loss = energy + log_z
    return LossReport(loss=loss, terms={"energy": energy.item(), "log_z": log_z.item()}, n=len(x))


def loss_sml(model: FlowModel, batch, rng: np.random.Generator, samples: Optional[np.ndarray] = None) -> LossReport:
    """Mean energy of the data minus mean energy of detached model samples."""
    x = _batch(batch)
    if samples is None:
        with T.no_grad():
            samples = model.sample(len(x), rng)
    data_term = T.mean(model.energy(x))
    model_term = T.mean(model.energy(Tensor(samples)))
    loss = data_term - model_term
    return LossReport(
        loss=loss, terms={"data_energy": data_term.item(), "model_energy": model_term.item()}, n=len(x)
    )


def loss_sm_exact(model: FlowModel, batch) -> LossReport:
    """1/2 |dE/dx|^2 - tr(d^2E/dx^2) with the trace from D Hessian-vector products."""
    x = Tensor(_batch(batch), requires_grad=True)
    n, d = x.shape
    g = model.energy_gradient(x, create_graph=True)
    norm_term = T.mean(T.squared_norm(g, axis=1)) * 0.5
    trace = None
    for i in range(d):
        (h_col,) = T.grad(T.tensor_sum(T.take(g, i, i + 1, axis=1)), [x], create_graph=True)
        diag = T.tensor_sum(T.take(h_col, i, i + 1, axis=1))
        trace = diag if trace is None else trace + diag
    trace_term = trace / float(n)
    loss = norm_term - trace_term
    return LossReport(loss=loss, terms={"norm": norm_term.item(), "trace": trace_term.item()}, n=n)


def loss_ssm(
    model: FlowModel,
    batch,
    rng: Optional[np.random.Generator] = None,
    n_v: int = 1,
    projection: Projection = Projection.RADEMACHER,
    projections: Optional[np.ndarray] = None,
) -> LossReport:
    """1/2 |dE/dx|^2 - v^T (d^2E/dx^2) v averaged over ``n_v`` projections per sample."""
    x = Tensor(_batch(batch), requires_grad=True)
    n, d = x.shape
    if projections is None:
        projections = draw_projections(n_v, n, d, projection, rng)
    projections = np.asarray(projections, dtype=np.float64).reshape(-1, n, d)
    g = model.energy_gradient(x, create_graph=True)
    norm_term = T.mean(T.squared_norm(g, axis=1)) * 0.5
    quad = None
    for v in projections:
        v = Tensor(v)
        (hv,) = T.grad(T.tensor_sum(g * v), [x], create_graph=True)
        term = T.tensor_sum(hv * v)
        quad = term if quad is None else quad + term
    hessian_term = quad / float(n * len(projections))
    loss = norm_term - hessian_term
    return LossReport(loss=loss, terms={"norm": norm_term.item(), "hessian": hessian_term.item()}, n=n)


def loss_dsm(
    model: FlowModel,
    batch,
    rng: Optional[np.random.Generator] = None,
    sigma: float = 0.1,
    noise: Optional[np.ndarray] = None,
) -> LossReport:
    """1/2 |dE/dx~ + (x - x~) / sigma^2|^2 with x~ = x + sigma z."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    x = _batch(batch)
    if noise is None:
        noise = rng.standard_normal(x.shape)
    noisy = x + sigma * np.asarray(noise, dtype=np.float64)
    x_tilde = Tensor(noisy, requires_grad=True)
    g = model.energy_gradient(x_tilde, create_graph=True)
    residual = g + Tensor((x - noisy) / sigma**2)
    loss = T.mean(T.squared_norm(residual, axis=1)) * 0.5
    return LossReport(loss=loss, terms={"dsm": loss.item()}, n=len(x))


def loss_fdssm(
    model: FlowModel,
    batch,
    rng: Optional[np.random.Generator] = None,
    xi: float = 0.1,
    perturbation: Optional[np.ndarray] = None,
) -> LossReport:
    """2E(x) - E(x+e) - E(x-e) + 1/8 (E(x+e) - E(x-e))^2 with e uniform on the xi-sphere."""
    if xi <= 0:
        raise ValueError(f"xi must be positive, got {xi}")
    x = _batch(batch)
    eps = draw_sphere(len(x), x.shape[1], xi, rng) if perturbation is None else np.asarray(perturbation)
    center = model.energy(x)
    plus = model.energy(x + eps)
    minus = model.energy(x - eps)
    diff = plus - minus
    per_sample = center * 2.0 - plus - minus + diff * diff * 0.125
    loss = T.mean(per_sample)
    terms = {
        "second_difference": T.mean(center * 2.0 - plus - minus).item(),
        "first_difference_sq": T.mean(diff * diff * 0.125).item(),
    }
    return LossReport(loss=loss, terms=terms, n=len(x))


def compute_loss(model: FlowModel, batch, objective: ObjectiveConfig, rng: np.random.Generator) -> LossReport:
    """Dispatch on the configured objective."""
    kind = objective.kind
    if kind == ObjectiveKind.ML:
        return loss_ml(model, batch)
    if kind == ObjectiveKind.SML:
        return loss_sml(model, batch, rng)
    if kind == ObjectiveKind.SM_EXACT:
        return loss_sm_exact(model, batch)
    if kind == ObjectiveKind.SSM:
        return loss_ssm(model, batch, rng, n_v=objective.n_v, projection=objective.projection)
    if kind == ObjectiveKind.DSM:
        return loss_dsm(model, batch, rng, sigma=objective.sigma)
    return loss_fdssm(model, batch, rng, xi=objective.xi)


def fdssm_scale(xi: float, dim: int) -> float:
    """For small xi the FD-SSM loss approaches (xi^2 / D) times the SM loss."""
    return xi * xi / float(dim)
