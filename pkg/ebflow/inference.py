"""Sampling, Langevin imputation and importance-sampling estimates of Z."""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy import special

from ebflow import tensor as T
from ebflow.architectures import build_linear_gaussian
from ebflow.config import ISConfig, LangevinConfig
from ebflow.errors import ImportanceSamplingError, SamplingError, ShapeError
from ebflow.flow import FlowModel, prior_log_pdf
from ebflow.tensor import Tensor

logger = logging.getLogger(__name__)


def sample_inverse(model: FlowModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """x = g^{-1}(u) with u drawn from the prior."""
    return model.sample(n, rng)


@dataclass
class ImputationResult:
    final: np.ndarray
    iterations: int = 0
    trajectory: List[Tuple[int, np.ndarray]] = field(default_factory=list)

    def trajectory_frame(self) -> pd.DataFrame:
        """One row per (iteration, chain) with every coordinate."""
        rows = []
        for iteration, states in self.trajectory:
            for chain, state in enumerate(states):
                rows.append([iteration, chain, *state])
        dim = self.final.shape[1]
        return pd.DataFrame(rows, columns=["iter", "chain", *[f"x{i}" for i in range(dim)]])


def impute_langevin(
    model: FlowModel,
    x_observed: np.ndarray,
    mask: np.ndarray,
    config: LangevinConfig,
    init: Optional[np.ndarray] = None,
) -> ImputationResult:
    """Unadjusted Langevin on the masked coordinates:

        x_M <- x_M - alpha dE/dx_M + sqrt(2 alpha) z

    ``x_observed`` holds one row per chain; entries under ``mask`` (True =
    free) are ignored and replaced by standard normal draws unless ``init``
    is given. Observed coordinates are never written.
    """
    rng = np.random.default_rng(config.seed)
    mask = np.asarray(mask, dtype=bool)
    x = np.atleast_2d(np.asarray(x_observed, dtype=np.float64)).copy()
    if mask.ndim != 1 or x.shape[1] != mask.size or mask.size != model.dim:
        raise ShapeError("impute_langevin", [x.shape, mask.shape], f"mask must cover the {model.dim} coordinates")
    if mask.all() or not mask.any():
        raise ValueError("imputation needs at least one masked and one observed coordinate")
    free = np.flatnonzero(mask)
    x[:, free] = rng.standard_normal((len(x), len(free))) if init is None else np.asarray(init).reshape(len(x), -1)

    alpha = config.step_size
    noise_scale = math.sqrt(2.0 * alpha)
    result = ImputationResult(final=x)
    for iteration in range(1, config.iterations + 1):
        leaf = Tensor(x, requires_grad=True)
        grad = model.energy_gradient(leaf).data[:, free]
        if not np.all(np.isfinite(grad)):
            raise SamplingError(iteration)
        x[:, free] = x[:, free] - alpha * grad + noise_scale * rng.standard_normal((len(x), len(free)))
        if config.thin and iteration % config.thin == 0:
            result.trajectory.append((iteration, x.copy()))
    result.final = x
    result.iterations = config.iterations
    logger.info(f"Langevin imputation finished: {config.iterations} steps, {len(x)} chain(s)")
    return result


class ISEstimate(BaseModel):
    """Importance-sampling estimate of the partition function"""

    log_z: float = Field(description="log of the importance-sampling mean")
    estimate: float = Field(description="Z estimate")
    stderr: float = Field(description="Standard error of the Z estimate")
    samples: int = Field(description="Number of proposal draws")
    dim: int = Field(description="Dimension D")
    effective_sample_size: float = Field(description="Kish effective sample size of the weights")


def _log_weights(model: FlowModel, draws: np.ndarray, batch_size: int) -> np.ndarray:
    """log exp(-E(x)) / q(x) for proposal draws x ~ q = N(0, I)."""
    log_w = np.empty(len(draws))
    with T.no_grad():
        for start in range(0, len(draws), batch_size):
            chunk = draws[start : start + batch_size]
            log_w[start : start + len(chunk)] = -model.energy(chunk).data - prior_log_pdf(chunk)
    return log_w


def estimate_log_partition_is(model: FlowModel, config: ISConfig) -> ISEstimate:
    """Z ~ 1/M sum exp(-E(x_j)) / q(x_j) with q = N(0, I), evaluated in log space."""
    rng = np.random.default_rng(config.seed)
    log_w = _log_weights(model, rng.standard_normal((config.samples, model.dim)), config.batch_size)
    if not np.any(np.isfinite(log_w)):
        raise ImportanceSamplingError(
            "every importance weight underflowed; the N(0, I) proposal does not cover the model"
        )
    peak = np.max(log_w[np.isfinite(log_w)])
    w = np.exp(log_w - peak)
    mean_w = float(np.mean(w))
    log_z = peak + math.log(mean_w)
    relative_se = float(np.std(w, ddof=1) / (math.sqrt(len(w)) * mean_w)) if len(w) > 1 else 0.0
    ess = float(np.sum(w) ** 2 / np.sum(w * w))
    if ess < 0.01 * len(w):
        logger.warning(f"Importance weights are degenerate: effective sample size {ess:.1f} of {len(w)}")
    estimate = math.exp(log_z)
    return ISEstimate(
        log_z=log_z,
        estimate=estimate,
        stderr=estimate * relative_se,
        samples=config.samples,
        dim=model.dim,
        effective_sample_size=ess,
    )


def determinant_error(model: FlowModel, estimate: ISEstimate) -> float:
    """|d_true - d_est| / |d_true| on the determinant scale, d = 1/Z."""
    return abs(1.0 - math.exp(model.log_partition() - estimate.log_z))


def determinant_error_curve(
    dim: int,
    samples: Sequence[int],
    seed: int = 0,
    weight_law: str = "near_identity",
    repeats: int = 32,
) -> List[float]:
    """Relative determinant error of the IS estimate for a random g(x) = W x, one value per M in ``samples``.

    One W is drawn per seed. Each of the ``repeats`` proposal sets is drawn
    once at the largest M and every smaller M uses a prefix of it, so the
    errors along the curve share their draws. Errors are averaged over the
    proposal sets.
    """
    samples = list(samples)
    if not samples or min(samples) < 1:
        raise ValueError(f"sample counts must be positive, got {samples}")
    if repeats < 1:
        raise ValueError(f"repeats must be at least 1, got {repeats}")
    model = build_linear_gaussian(dim, weight_law, np.random.default_rng(seed))
    log_z = model.log_partition()
    largest = max(samples)
    errors = np.empty((repeats, len(samples)))
    for repeat in range(repeats):
        draws = np.random.default_rng([seed, 1, repeat]).standard_normal((largest, dim))
        log_w = _log_weights(model, draws, ISConfig().batch_size)
        for j, m in enumerate(samples):
            log_z_est = special.logsumexp(log_w[:m]) - math.log(m)
            errors[repeat, j] = abs(1.0 - math.exp(log_z - log_z_est))
    curve = errors.mean(axis=0)
    summary = ", ".join(f"M={m}: {e:.4g}" for m, e in zip(samples, curve))
    logger.debug(f"determinant error D={dim} seed={seed}: {summary}")
    return [float(e) for e in curve]


def simulate_determinant_error(
    dim: int, samples: int, seed: int = 0, weight_law: str = "near_identity", repeats: int = 32
) -> float:
    """Mean relative determinant error of the IS estimate at a single M."""
    return determinant_error_curve(dim, [samples], seed, weight_law, repeats)[0]


def write_trajectory(result: ImputationResult, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = result.trajectory_frame()
    if frame.empty:
        final = result.final
        frame = pd.DataFrame(
            [[result.iterations, chain, *state] for chain, state in enumerate(final)],
            columns=["iter", "chain", *[f"x{i}" for i in range(final.shape[1])]],
        )
    frame.to_csv(path, index=False)
    logger.info(f"Wrote imputation trajectory to {path}")
    return path
