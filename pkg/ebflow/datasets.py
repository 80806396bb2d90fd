"""Synthetic datasets with closed-form density and score oracles."""

import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy import special

from ebflow import tensor as T
from ebflow.errors import ShapeError
from ebflow.tensor import Tensor

logger = logging.getLogger(__name__)

CURVE_KINDS = ("sine", "swirl", "checkerboard")
_GAUSS_PATTERN = re.compile(r"^gauss-(\d+)$")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    dim: int

    @property
    def name(self) -> str:
        return self.kind if self.kind in CURVE_KINDS else f"gauss-{self.dim}"


def parse_dataset(name: str) -> DatasetSpec:
    """Parse ``sine``, ``swirl``, ``checkerboard`` or ``gauss-D``."""
    if name in CURVE_KINDS:
        return DatasetSpec(name, 2)
    match = _GAUSS_PATTERN.match(name)
    if match and int(match.group(1)) >= 1:
        return DatasetSpec("gauss", int(match.group(1)))
    raise ValueError(f"unknown dataset '{name}': expected one of {', '.join(CURVE_KINDS)} or gauss-D")


def sine_curve(w: np.ndarray) -> np.ndarray:
    return np.stack([4.0 * w - 2.0, np.sin(12.0 * w - 6.0)], axis=-1)


def swirl_curve(w: np.ndarray) -> np.ndarray:
    r = math.pi * np.sqrt(w)
    return np.stack([-r * np.cos(r), r * np.sin(r)], axis=-1)


def checkerboard_curve(w: np.ndarray, t: np.ndarray, s: np.ndarray) -> np.ndarray:
    x0 = 4.0 * w - 2.0
    # (t - 2s) + (floor(x0) mod 2); np.mod keeps the parity non-negative for x0 < 0
    x1 = t - 2.0 * s + np.mod(np.floor(x0), 2.0)
    return np.stack([x0, x1], axis=-1)


def sample_base(dataset: Union[str, DatasetSpec], n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` points from the parametric base set of a dataset."""
    spec = parse_dataset(dataset) if isinstance(dataset, str) else dataset
    if n < 1:
        raise ValueError(f"need at least one sample, got {n}")
    if spec.kind == "sine":
        return sine_curve(rng.uniform(0.0, 1.0, n))
    if spec.kind == "swirl":
        return swirl_curve(rng.uniform(0.0, 1.0, n))
    if spec.kind == "checkerboard":
        w = rng.uniform(0.0, 1.0, n)
        t = rng.uniform(0.0, 1.0, n)
        s = rng.integers(0, 2, n).astype(np.float64)
        return checkerboard_curve(w, t, s)
    return rng.standard_normal((n, spec.dim))


# Coordinate-wise bounds of each parametric base set.
_BASE_SUPPORT = {
    "sine": (-2.0, 2.0),
    "swirl": (-math.pi, math.pi),
    "checkerboard": (-2.0, 2.0),
}


def dequantized_support(dataset: Union[str, DatasetSpec], scale: float) -> Tuple[float, float]:
    """Box [lo, hi] holding every ``dequantized`` training point of a dataset."""
    spec = parse_dataset(dataset) if isinstance(dataset, str) else dataset
    if spec.kind not in _BASE_SUPPORT:
        raise ValueError(f"{spec.name} data is unbounded; a logit preprocess cannot cover it")
    lo, hi = _BASE_SUPPORT[spec.kind]
    return lo, hi + scale


def dequantize_uniform(x: np.ndarray, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Add uniform noise covering one quantization bin of width ``scale``."""
    x = np.asarray(x, dtype=np.float64)
    if scale == 0:
        return x.copy()
    return x + scale * rng.uniform(0.0, 1.0, x.shape)


def _check_points(x: np.ndarray, dim: int, who: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(who, [x.shape], f"expected points of dimension {dim}")
    return x


class MixtureOracle:
    """Equal-weight isotropic Gaussian mixture, p(x) = 1/M sum_i N(x | c_i, s^2 I).

    Every evaluation goes through log-sum-exp so the box corners do not underflow.
    """

    def __init__(self, centers: np.ndarray, bandwidth: float, chunk_size: int = 4096):
        centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        if centers.shape[0] < 1:
            raise ValueError("a mixture oracle needs at least one center")
        if bandwidth <= 0:
            raise ValueError(f"bandwidth must be positive, got {bandwidth}")
        self.centers = centers
        self.bandwidth = float(bandwidth)
        self.chunk_size = chunk_size
        self._center_sq = np.sum(centers * centers, axis=1)

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def size(self) -> int:
        return self.centers.shape[0]

    def _log_kernel(self, x: np.ndarray) -> np.ndarray:
        sq = np.sum(x * x, axis=1)[:, None] - 2.0 * x @ self.centers.T + self._center_sq[None, :]
        sq = np.maximum(sq, 0.0)
        norm = self.dim * math.log(self.bandwidth * math.sqrt(2.0 * math.pi))
        return -0.5 * sq / self.bandwidth**2 - norm

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        x = _check_points(x, self.dim, "mixture log_pdf")
        out = np.empty(len(x))
        for start in range(0, len(x), self.chunk_size):
            chunk = x[start : start + self.chunk_size]
            out[start : start + len(chunk)] = special.logsumexp(self._log_kernel(chunk), axis=1)
        return out - math.log(self.size)

    def pdf(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.log_pdf(x))

    def score(self, x: np.ndarray) -> np.ndarray:
        """Gradient of the log density: sum_i r_i(x) (c_i - x) / s^2 with softmax responsibilities r."""
        x = _check_points(x, self.dim, "mixture score")
        out = np.empty_like(x)
        for start in range(0, len(x), self.chunk_size):
            chunk = x[start : start + self.chunk_size]
            log_k = self._log_kernel(chunk)
            resp = np.exp(log_k - special.logsumexp(log_k, axis=1, keepdims=True))
            out[start : start + len(chunk)] = (resp @ self.centers - chunk) / self.bandwidth**2
        return out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        picks = rng.integers(0, self.size, n)
        return self.centers[picks] + self.bandwidth * rng.standard_normal((n, self.dim))

    def log_pdf_tensor(self, x: Tensor) -> Tensor:
        """The same log density recorded on the tape, shape (N,)."""
        n, m = x.shape[0], self.size
        sq = (
            T.squared_norm(x, axis=1).expand(1, m)
            - (x @ Tensor(self.centers.T)) * 2.0
            + Tensor(self._center_sq).expand(0, n)
        )
        log_k = sq * (-0.5 / self.bandwidth**2)
        peak = Tensor(np.max(log_k.data, axis=1))
        shifted = T.exp(log_k - peak.expand(1, m))
        norm = self.dim * math.log(self.bandwidth * math.sqrt(2.0 * math.pi)) + math.log(m)
        return T.log(T.tensor_sum(shifted, axis=1)) + peak - norm


class GaussianOracle:
    """Isotropic Gaussian N(0, scale^2 I) in D dimensions."""

    def __init__(self, dim: int, scale: float = 1.0):
        if dim < 1 or scale <= 0:
            raise ValueError(f"invalid Gaussian oracle (dim={dim}, scale={scale})")
        self.dim = dim
        self.scale = float(scale)

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        x = _check_points(x, self.dim, "gaussian log_pdf")
        norm = 0.5 * self.dim * math.log(2.0 * math.pi) + self.dim * math.log(self.scale)
        return -0.5 * np.sum(x * x, axis=1) / self.scale**2 - norm

    def pdf(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.log_pdf(x))

    def score(self, x: np.ndarray) -> np.ndarray:
        x = _check_points(x, self.dim, "gaussian score")
        return -x / self.scale**2

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.scale * rng.standard_normal((n, self.dim))

    def log_pdf_tensor(self, x: Tensor) -> Tensor:
        norm = 0.5 * self.dim * math.log(2.0 * math.pi) + self.dim * math.log(self.scale)
        return T.squared_norm(x, axis=1) * (-0.5 / self.scale**2) - norm

    def entropy(self) -> float:
        return 0.5 * self.dim * (1.0 + math.log(2.0 * math.pi)) + self.dim * math.log(self.scale)


Oracle = Union[MixtureOracle, GaussianOracle]


def build_oracle(
    dataset: Union[str, DatasetSpec], M: int, sigma_hat: float, rng: np.random.Generator
) -> Oracle:
    """Mixture oracle whose centers are ``M`` base samples; gauss-D gives the exact prior."""
    spec = parse_dataset(dataset) if isinstance(dataset, str) else dataset
    if spec.kind == "gauss":
        return GaussianOracle(spec.dim)
    if M < 1:
        raise ValueError(f"M must be at least 1, got {M}")
    oracle = MixtureOracle(sample_base(spec, M, rng), sigma_hat)
    logger.info(f"Built {spec.name} oracle with M={M}, sigma_hat={sigma_hat}")
    return oracle


class DataSource:
    """Training batches for one run.

    ``smoothed`` draws from the oracle itself; ``dequantized`` draws from the
    parametric base set plus uniform dequantization, which keeps every point
    inside a bounded box.
    """

    def __init__(self, dataset: DatasetSpec, oracle: Oracle, source: str = "smoothed", scale: float = 0.05):
        if source not in ("smoothed", "dequantized"):
            raise ValueError(f"unknown data source '{source}'")
        self.dataset = dataset
        self.oracle = oracle
        self.source = source
        self.scale = scale

    def batch(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.source == "smoothed":
            return self.oracle.sample(n, rng)
        return dequantize_uniform(sample_base(self.dataset, n, rng), self.scale, rng)


def write_points_csv(points: np.ndarray, path: Union[str, Path], index_name: Optional[str] = None) -> Path:
    """Write points with an x0, x1, ... header."""
    points = np.atleast_2d(points)
    frame = pd.DataFrame(points, columns=[f"x{i}" for i in range(points.shape[1])])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if index_name:
        frame.index.name = index_name
        frame.to_csv(path)
    else:
        frame.to_csv(path, index=False)
    logger.info(f"Wrote {len(frame)} points to {path}")
    return path
