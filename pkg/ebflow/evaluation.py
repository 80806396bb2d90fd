"""Divergences against exact oracles, MaP identity checks and the runtime benchmark."""

import logging
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from PIL import Image
from pydantic import BaseModel, Field, field_validator
from scipy import integrate
from threadpoolctl import threadpool_limits

from ebflow import tensor as T
from ebflow.architectures import build_fc
from ebflow.config import ObjectiveConfig, ObjectiveKind, Settings
from ebflow.datasets import GaussianOracle, Oracle
from ebflow.errors import EBFlowError, ShapeError
from ebflow.flow import FlowModel
from ebflow.objectives import compute_loss
from ebflow.tensor import Tensor

logger = logging.getLogger(__name__)

QUADRATURE_BOX = 8.0
QUADRATURE_POINTS = 400
CHUNK_SIZE = 20000


class DivergenceReport(BaseModel):
    """KL, Fisher divergence and NLL of a model against an oracle"""

    kl: float = Field(description="KL(p_x || p_model)")
    kl_stderr: float = Field(default=0.0, description="Standard error of the KL estimate")
    fisher: float = Field(description="Fisher divergence")
    fisher_stderr: float = Field(default=0.0, description="Standard error of the Fisher estimate")
    nll: float = Field(description="Expected negative log-likelihood under p_x")
    nll_stderr: float = Field(default=0.0, description="Standard error of the NLL estimate")
    n_eval: int = Field(description="Samples, or grid points for quadrature")
    method: str = Field(description="monte-carlo or quadrature")

    def summary(self) -> str:
        return (
            f"KL {self.kl:.4f} +/- {self.kl_stderr:.4f} | Fisher {self.fisher:.4e} +/- {self.fisher_stderr:.1e}"
            f" | NLL {self.nll:.4f} +/- {self.nll_stderr:.4f} ({self.method}, n={self.n_eval})"
        )


class ScalingFit(BaseModel):
    """Per-step wall time against dimension with a log-log slope"""

    objective: str = Field(description="Objective that was timed")
    dims: List[int] = Field(description="Dimensions, strictly increasing")
    times: List[float] = Field(description="Median seconds per step at each dimension")
    slope: float = Field(description="Least-squares slope of log time against log D")

    @field_validator("dims")
    @classmethod
    def _increasing(cls, dims: List[int]) -> List[int]:
        if any(b <= a for a, b in zip(dims, dims[1:])):
            raise ValueError("dims must be strictly increasing")
        return dims

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"objective": self.objective, "dim": self.dims, "seconds": self.times, "slope": self.slope})


class MapIdentityReport(BaseModel):
    """Divergences of the full model and of the head after preprocessing"""

    k: int = Field(description="Number of preprocess layers")
    kl_data: float = Field(description="KL(p_x || p_0) on the data grid")
    kl_pushforward: float = Field(description="KL(p_xk || p_k) on the preprocessed grid")
    fisher_data: float = Field(description="Fisher(p_x || p_0) on the data grid")
    fisher_pushforward: float = Field(description="Fisher(p_x || p_0) as an expectation over p_xk")
    fisher_preprocessed: float = Field(description="Fisher(p_xk || p_k)")
    mass_data: float = Field(description="Quadrature mass of p_x")
    mass_pushforward: float = Field(description="Quadrature mass of p_xk")

    @property
    def kl_gap(self) -> float:
        return abs(self.kl_data - self.kl_pushforward)

    @property
    def fisher_gap(self) -> float:
        return abs(self.fisher_data - self.fisher_pushforward)

    def zero_equivalent(self, tol: float) -> bool:
        """Both Fisher divergences vanish together or neither does."""
        return (self.fisher_data < tol) == (self.fisher_preprocessed < tol)


@dataclass
class QuadratureGrid:
    xs: np.ndarray
    ys: np.ndarray

    @classmethod
    def square(cls, box: float = QUADRATURE_BOX, points: int = QUADRATURE_POINTS) -> "QuadratureGrid":
        axis = np.linspace(-box, box, points)
        return cls(axis, axis.copy())

    @classmethod
    def spanning(cls, lo: np.ndarray, hi: np.ndarray, points: int = QUADRATURE_POINTS) -> "QuadratureGrid":
        return cls(np.linspace(lo[0], hi[0], points), np.linspace(lo[1], hi[1], points))

    @property
    def points(self) -> np.ndarray:
        gx, gy = np.meshgrid(self.xs, self.ys, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel()])

    @property
    def size(self) -> int:
        return len(self.xs) * len(self.ys)

    def integrate(self, values: np.ndarray) -> float:
        grid = np.asarray(values).reshape(len(self.xs), len(self.ys))
        return float(integrate.trapezoid(integrate.trapezoid(grid, self.ys, axis=1), self.xs))


def _sharded(fn: Callable[[np.ndarray], np.ndarray], points: np.ndarray, threads: Optional[int] = None) -> np.ndarray:
    """Apply ``fn`` chunk-wise, in parallel over EBFLOW_THREADS workers."""
    threads = threads or Settings.from_env().threads
    chunks = [points[i : i + CHUNK_SIZE] for i in range(0, len(points), CHUNK_SIZE)]
    if threads <= 1 or len(chunks) == 1:
        results = [fn(chunk) for chunk in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(fn, chunks))
    return np.concatenate(results, axis=0)


def model_log_prob(model: FlowModel, points: np.ndarray, threads: Optional[int] = None) -> np.ndarray:
    log_z = model.log_partition()

    def run(chunk):
        with T.no_grad():
            return -model.energy(chunk).data - log_z

    return _sharded(run, points, threads)


def model_score(model: FlowModel, points: np.ndarray, threads: Optional[int] = None) -> np.ndarray:
    return _sharded(lambda chunk: model.score(chunk).data, points, threads)


def _mean_stderr(values: np.ndarray):
    n = len(values)
    stderr = float(np.std(values, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(np.mean(values)), stderr


def _weighted(p: np.ndarray, values: np.ndarray) -> np.ndarray:
    return np.where(p > 0, p * values, 0.0)


def _draw(oracle: Oracle, n: int, rng: Optional[np.random.Generator], samples: Optional[np.ndarray]) -> np.ndarray:
    if samples is not None:
        return samples
    if rng is None:
        raise ValueError("either samples or rng is required for Monte Carlo evaluation")
    return oracle.sample(n, rng)


def kl_divergence(
    oracle: Oracle,
    model: FlowModel,
    n: int = 100_000,
    rng: Optional[np.random.Generator] = None,
    method: str = "monte-carlo",
    samples: Optional[np.ndarray] = None,
    grid: Optional[QuadratureGrid] = None,
) -> float:
    """KL(p_x || p_model) by Monte Carlo over oracle samples or by 2D quadrature."""
    if method == "quadrature":
        grid = grid or QuadratureGrid.square()
        points = grid.points
        log_px = oracle.log_pdf(points)
        return grid.integrate(_weighted(np.exp(log_px), log_px - model_log_prob(model, points)))
    x = _draw(oracle, n, rng, samples)
    return float(np.mean(oracle.log_pdf(x) - model_log_prob(model, x)))


def fisher_divergence(
    oracle: Oracle,
    model: FlowModel,
    n: int = 100_000,
    rng: Optional[np.random.Generator] = None,
    samples: Optional[np.ndarray] = None,
) -> float:
    """E_px[1/2 |score_x - score_model|^2]; never needs log Z."""
    x = _draw(oracle, n, rng, samples)
    diff = oracle.score(x) - model_score(model, x)
    return float(np.mean(0.5 * np.sum(diff * diff, axis=1)))


def nll(
    oracle: Oracle,
    model: FlowModel,
    n: int = 100_000,
    rng: Optional[np.random.Generator] = None,
    samples: Optional[np.ndarray] = None,
) -> float:
    x = _draw(oracle, n, rng, samples)
    return float(-np.mean(model_log_prob(model, x)))


def oracle_entropy(oracle: Oracle, grid: Optional[QuadratureGrid] = None) -> float:
    """Differential entropy, closed form for Gaussians and by quadrature otherwise."""
    if isinstance(oracle, GaussianOracle):
        return oracle.entropy()
    grid = grid or QuadratureGrid.square()
    log_px = oracle.log_pdf(grid.points)
    return -grid.integrate(_weighted(np.exp(log_px), log_px))


def evaluate(
    oracle: Oracle,
    model: FlowModel,
    n: int = 100_000,
    rng: Optional[np.random.Generator] = None,
    method: str = "monte-carlo",
    grid: Optional[QuadratureGrid] = None,
) -> DivergenceReport:
    """Full report; Monte Carlo estimates share one sample set."""
    if method == "quadrature":
        if oracle.dim != 2:
            raise ShapeError("evaluate", [(oracle.dim,)], "quadrature needs D=2")
        grid = grid or QuadratureGrid.square()
        points = grid.points
        log_px = oracle.log_pdf(points)
        p = np.exp(log_px)
        log_p = model_log_prob(model, points)
        diff = oracle.score(points) - model_score(model, points)
        return DivergenceReport(
            kl=grid.integrate(_weighted(p, log_px - log_p)),
            fisher=grid.integrate(_weighted(p, 0.5 * np.sum(diff * diff, axis=1))),
            nll=grid.integrate(_weighted(p, -log_p)),
            n_eval=grid.size,
            method="quadrature",
        )
    x = _draw(oracle, n, rng, None)
    log_p = model_log_prob(model, x)
    kl, kl_se = _mean_stderr(oracle.log_pdf(x) - log_p)
    diff = oracle.score(x) - model_score(model, x)
    fisher, fisher_se = _mean_stderr(0.5 * np.sum(diff * diff, axis=1))
    nll_value, nll_se = _mean_stderr(-log_p)
    return DivergenceReport(
        kl=kl,
        kl_stderr=kl_se,
        fisher=fisher,
        fisher_stderr=fisher_se,
        nll=nll_value,
        nll_stderr=nll_se,
        n_eval=len(x),
        method="monte-carlo",
    )


def write_report(report: DivergenceReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame([report.model_dump()]).to_csv(path, index=False)
    logger.info(f"Evaluation: {report.summary()}")
    logger.info(f"Wrote report to {path}")
    return path


def partition_by_quadrature(model: FlowModel, grid: Optional[QuadratureGrid] = None) -> float:
    """Integral of exp(-E) over the grid, which should equal Z."""
    grid = grid or QuadratureGrid.square()

    def run(chunk):
        with T.no_grad():
            return np.exp(-model.energy(chunk).data)

    return grid.integrate(_sharded(run, grid.points))


def _log_det(model: FlowModel, x: np.ndarray) -> np.ndarray:
    def run(chunk):
        with T.no_grad():
            z = Tensor(chunk)
            total = np.zeros(len(chunk))
            for layer in model.layers:
                z, ldj = layer.transform(z)
                total = total + ldj.data
            return total

    return _sharded(run, x)


def _jacobians(model: FlowModel, x: np.ndarray) -> np.ndarray:
    return _sharded(lambda chunk: T.batch_jacobian(model.forward, chunk), x)


def verify_map_identities(
    oracle: Oracle,
    model: FlowModel,
    k: Optional[int] = None,
    points: int = QUADRATURE_POINTS,
    box: float = QUADRATURE_BOX,
    density_floor: float = 1e-10,
) -> MapIdentityReport:
    """Compare divergences before and after the first ``k`` layers by two independent quadratures.

    The data-space grid is the usual box. The preprocessed grid spans the
    images of every data-grid point whose oracle density exceeds
    ``density_floor`` times the peak, padded by five percent.
    """
    k = model.map_k if k is None else k
    if k < 1 or k >= len(model):
        raise EBFlowError(f"MaP identities need 1 <= k < L, got k={k}")
    if oracle.dim != 2 or model.dim != 2:
        raise ShapeError("verify_map_identities", [(oracle.dim,), (model.dim,)], "quadrature needs D=2")
    preprocess = FlowModel(model.layers[:k])
    head = FlowModel(model.layers[k:])

    data_grid = QuadratureGrid.square(box, points)
    x = data_grid.points
    log_px = oracle.log_pdf(x)
    px = np.exp(log_px)
    diff = oracle.score(x) - model_score(model, x)
    kl_data = data_grid.integrate(_weighted(px, log_px - model_log_prob(model, x)))
    fisher_data = data_grid.integrate(_weighted(px, 0.5 * np.sum(diff * diff, axis=1)))
    mass_data = data_grid.integrate(px)

    dense = x[px > density_floor * px.max()]
    with T.no_grad():
        images = _sharded(lambda chunk: preprocess.forward(chunk).data, dense)
    lo, hi = images.min(axis=0), images.max(axis=0)
    pad = 0.05 * (hi - lo)
    pre_grid = QuadratureGrid.spanning(lo - pad, hi + pad, points)
    q = pre_grid.points
    x_back = preprocess.inverse(q)
    log_pxk = oracle.log_pdf(x_back) - _log_det(preprocess, x_back)
    pxk = np.exp(log_pxk)
    kl_push = pre_grid.integrate(_weighted(pxk, log_pxk - model_log_prob(head, q)))

    score_gap = oracle.score(x_back) - model_score(model, x_back)
    fisher_push = pre_grid.integrate(_weighted(pxk, 0.5 * np.sum(score_gap * score_gap, axis=1)))
    jac = _jacobians(preprocess, x_back)
    pulled = np.linalg.solve(np.transpose(jac, (0, 2, 1)), score_gap[..., None])[..., 0]
    fisher_pre = pre_grid.integrate(_weighted(pxk, 0.5 * np.sum(pulled * pulled, axis=1)))

    report = MapIdentityReport(
        k=k,
        kl_data=kl_data,
        kl_pushforward=kl_push,
        fisher_data=fisher_data,
        fisher_pushforward=fisher_push,
        fisher_preprocessed=fisher_pre,
        mass_data=mass_data,
        mass_pushforward=pre_grid.integrate(pxk),
    )
    logger.info(f"MaP identities (k={k}): KL gap {report.kl_gap:.2e}, Fisher gap {report.fisher_gap:.2e}")
    return report


def bench_step_time(
    objective: Union[str, ObjectiveKind, Callable],
    dims: Sequence[int],
    n_linear: int = 4,
    reps: int = 21,
    warmup: int = 5,
    batch_size: int = 1,
    seed: int = 0,
) -> ScalingFit:
    """Median wall time of one training step (loss plus parameter gradient) per dimension.

    A callable ``objective`` is timed as the whole step and receives
    ``(model, batch, rng)``.
    BLAS runs on a single thread while timing.
    """
    rng = np.random.default_rng(seed)
    if callable(objective):
        name = getattr(objective, "__name__", "custom")
        step = objective
    else:
        kind = ObjectiveKind(objective)
        name = kind.value
        config = ObjectiveConfig(kind=kind, sigma=0.1, xi=0.1)

        def step(model, batch, step_rng):
            report = compute_loss(model, batch, config, step_rng)
            T.grad(report.loss, list(model.parameters().values()))

    times = []
    for dim in dims:
        model = build_fc(dim, n_linear=n_linear, rng=rng)
        batch = rng.standard_normal((batch_size, dim))
        samples = []
        with threadpool_limits(limits=1):
            for rep in range(warmup + reps):
                start = time.perf_counter()
                step(model, batch, rng)
                elapsed = time.perf_counter() - start
                if rep >= warmup:
                    samples.append(elapsed)
        times.append(statistics.median(samples))
        logger.info(f"bench {name}: D={dim} median {times[-1] * 1e3:.3f} ms")
    slope = float(np.polyfit(np.log(dims), np.log(times), 1)[0]) if len(dims) > 1 else 0.0
    return ScalingFit(objective=name, dims=list(dims), times=times, slope=slope)


@dataclass
class DensityGrid:
    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray


def density_grid(
    log_density: Callable[[np.ndarray], np.ndarray], box: float = QUADRATURE_BOX, points: int = QUADRATURE_POINTS
) -> DensityGrid:
    grid = QuadratureGrid.square(box, points)
    values = np.exp(log_density(grid.points)).reshape(points, points)
    return DensityGrid(grid.xs, grid.ys, values)


def write_density(grid: DensityGrid, stem: Union[str, Path]) -> List[Path]:
    """Heatmap as an 8-bit PGM (y up) plus the raw grid as CSV."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    peak = grid.values.max()
    scaled = grid.values / peak if peak > 0 else grid.values
    pixels = np.flipud((np.clip(scaled, 0.0, 1.0) * 255).round().astype(np.uint8).T)
    pgm = stem.with_suffix(".pgm")
    Image.fromarray(pixels).save(pgm)
    gx, gy = np.meshgrid(grid.xs, grid.ys, indexing="ij")
    csv = stem.with_suffix(".csv")
    pd.DataFrame({"x0": gx.ravel(), "x1": gy.ravel(), "density": grid.values.ravel()}).to_csv(csv, index=False)
    logger.info(f"Wrote density heatmap {pgm} and grid {csv}")
    return [pgm, csv]
