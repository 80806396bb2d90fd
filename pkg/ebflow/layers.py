"""Invertible layers of a linear flow.

Every layer maps a batch ``y`` of shape (N, D) to ``z`` of the same shape,
inverts ``z`` back (outside the tape), and reports the per-sample
log|det J|. Layers are tagged S_l (linear, input-independent determinant)
or S_n (non-linear).
"""

import logging
import math
from abc import ABC, abstractmethod
from enum import Enum
from typing import Any, Dict, Optional, Tuple

import numpy as np
from scipy import linalg, special

from ebflow import tensor as T
from ebflow.errors import DomainError, InversionError, ShapeError, SingularMatrixError
from ebflow.tensor import Tensor

logger = logging.getLogger(__name__)

NEWTON_MAX_ITERATIONS = 50
NEWTON_TOLERANCE = 1e-10


class LayerKind(str, Enum):
    ACTNORM = "actnorm"
    FULLY_CONNECTED = "fully_connected"
    SMOOTH_LEAKY_RELU = "smooth_leaky_relu"
    AFFINE_COUPLING = "affine_coupling"
    LOGIT_PREPROCESS = "logit_preprocess"


LINEAR_KINDS = frozenset({LayerKind.ACTNORM, LayerKind.FULLY_CONNECTED})


def _rows(vector: Tensor, n: int) -> Tensor:
    return vector.expand(0, n)


def _as_batch(y: Tensor, dim: int, layer: str) -> Tensor:
    if y.ndim != 2 or y.shape[1] != dim:
        raise ShapeError(layer, [y.shape], f"expected a batch of shape (N, {dim})")
    return y


class FlowLayer(ABC):
    """One invertible transform g_i."""

    kind: LayerKind

    def __init__(self, dim: int):
        self.dim = dim
        self.params: Dict[str, Tensor] = {}

    @property
    def is_linear(self) -> bool:
        """Membership in S_l."""
        return self.kind in LINEAR_KINDS

    @property
    def set_tag(self) -> str:
        return "S_l" if self.is_linear else "S_n"

    @abstractmethod
    def forward(self, y: Tensor) -> Tensor:
        """z = g_i(y), recorded on the tape."""

    @abstractmethod
    def inverse(self, z: np.ndarray) -> np.ndarray:
        """y = g_i^{-1}(z), evaluated outside the tape."""

    @abstractmethod
    def log_abs_det_jacobian(self, y: Tensor) -> Tensor:
        """Per-sample log|det J_{g_i}(y)|, shape (N,)."""

    def transform(self, y: Tensor) -> Tuple[Tensor, Tensor]:
        return self.forward(y), self.log_abs_det_jacobian(y)

    def config(self) -> Dict[str, Any]:
        return {"dim": self.dim}

    def __repr__(self) -> str:
        return f"{type(self).__name__}(dim={self.dim}, {self.set_tag})"


class LinearLayer(FlowLayer):
    """S_l layer: the determinant does not depend on the input."""

    @abstractmethod
    def log_abs_det(self) -> Tensor:
        """Scalar log|det J| on the tape."""

    def log_abs_det_jacobian(self, y: Tensor) -> Tensor:
        return self.log_abs_det().expand(0, y.shape[0])


class Actnorm(LinearLayer):
    """z = (y - beta) / gamma with data-dependent initialisation."""

    kind = LayerKind.ACTNORM

    def __init__(self, dim: int, beta=None, gamma=None, initialized: Optional[bool] = None):
        super().__init__(dim)
        beta = np.zeros(dim) if beta is None else np.asarray(beta, dtype=np.float64)
        gamma = np.ones(dim) if gamma is None else np.asarray(gamma, dtype=np.float64)
        self.params = {
            "beta": Tensor(beta, requires_grad=True, name="beta"),
            "gamma": Tensor(gamma, requires_grad=True, name="gamma"),
        }
        self.initialized = initialized if initialized is not None else False

    def initialize(self, batch: np.ndarray) -> None:
        std = batch.std(axis=0)
        self.params["beta"].data = batch.mean(axis=0)
        self.params["gamma"].data = np.where(std > 1e-6, std, 1.0)
        self.initialized = True
        logger.debug(f"actnorm initialised from a batch of {len(batch)}")

    def _check_gamma(self) -> np.ndarray:
        gamma = self.params["gamma"].data
        zero = np.flatnonzero(gamma == 0.0)
        if zero.size:
            raise SingularMatrixError(int(zero[0]), 0.0, "actnorm gamma")
        return gamma

    def forward(self, y):
        y = _as_batch(y, self.dim, "actnorm")
        self._check_gamma()
        n = y.shape[0]
        return (y - _rows(self.params["beta"], n)) / _rows(self.params["gamma"], n)

    def inverse(self, z):
        gamma = self._check_gamma()
        return z * gamma + self.params["beta"].data

    def log_abs_det(self):
        self._check_gamma()
        return -T.tensor_sum(T.log(T.absolute(self.params["gamma"])))

    def config(self):
        return {"dim": self.dim, "initialized": self.initialized}


class FullyConnected(LinearLayer):
    """z = W y + b."""

    kind = LayerKind.FULLY_CONNECTED

    def __init__(self, dim: int, weight=None, bias=None, rng: Optional[np.random.Generator] = None):
        super().__init__(dim)
        if weight is None:
            rng = rng if rng is not None else np.random.default_rng()
            q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
            weight = q * np.sign(np.diag(r))
        bias = np.zeros(dim) if bias is None else bias
        self.params = {
            "W": Tensor(weight, requires_grad=True, name="W"),
            "b": Tensor(bias, requires_grad=True, name="b"),
        }

    def forward(self, y):
        y = _as_batch(y, self.dim, "fully_connected")
        return y @ self.params["W"].T + _rows(self.params["b"], y.shape[0])

    def inverse(self, z):
        weight = self.params["W"].data
        lu, piv = T._lu(weight, "fully_connected inverse")
        return linalg.lu_solve((lu, piv), (z - self.params["b"].data).T).T

    def log_abs_det(self):
        _, logabs = T.slogdet(self.params["W"])
        return logabs


class SmoothLeakyReLU(FlowLayer):
    """z = alpha y + (1 - alpha) log(1 + e^y), elementwise."""

    kind = LayerKind.SMOOTH_LEAKY_RELU

    def __init__(self, dim: int, alpha: float = 0.3):
        super().__init__(dim)
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"smooth leaky ReLU needs 0 < alpha <= 1, got {alpha}")
        self.alpha = float(alpha)

    def forward(self, y):
        y = _as_batch(y, self.dim, "smooth_leaky_relu")
        if self.alpha == 1.0:
            return y * 1.0
        return y * self.alpha + T.softplus(y) * (1.0 - self.alpha)

    def log_abs_det_jacobian(self, y):
        y = _as_batch(y, self.dim, "smooth_leaky_relu")
        slope = T.sigmoid(y) * (1.0 - self.alpha) + self.alpha
        return T.tensor_sum(T.log(slope), axis=1)

    def inverse(self, z):
        z = np.asarray(z, dtype=np.float64)
        if self.alpha == 1.0:
            return z.copy()
        a = self.alpha
        shift = math.log(2.0)
        # g(y) >= y and g(y) <= alpha*y + (1-alpha)*(max(y,0) + log 2) bracket the root
        lo = np.minimum(z - shift, (z - shift) / a)
        hi = z.copy()
        y = z - (1.0 - a) * shift
        residual = np.inf
        for iteration in range(1, NEWTON_MAX_ITERATIONS + 1):
            f = a * y + (1.0 - a) * np.logaddexp(0.0, y) - z
            residual = float(np.max(np.abs(f))) if f.size else 0.0
            if residual < NEWTON_TOLERANCE:
                return y
            lo = np.where(f < 0, y, lo)
            hi = np.where(f > 0, y, hi)
            step = f / (a + (1.0 - a) * special.expit(y))
            candidate = y - step
            outside = (candidate <= lo) | (candidate >= hi)
            y = np.where(outside, 0.5 * (lo + hi), candidate)
        raise InversionError(
            "smooth leaky ReLU Newton inversion did not converge",
            residual=residual,
            iterations=NEWTON_MAX_ITERATIONS,
        )

    def config(self):
        return {"dim": self.dim, "alpha": self.alpha}


class AffineCoupling(FlowLayer):
    """z_a = s(y_b) * y_a + t(y_b), z_b = y_b.

    ``s`` and ``t`` are separate tanh networks with two hidden layers;
    ``s`` is the exponential of its raw output, so it stays positive.
    Parity 0 transforms the first ceil(D/2) coordinates, parity 1 the last.
    """

    kind = LayerKind.AFFINE_COUPLING

    def __init__(
        self,
        dim: int,
        hidden: int = 32,
        parity: int = 0,
        rng: Optional[np.random.Generator] = None,
        params: Optional[Dict[str, np.ndarray]] = None,
    ):
        super().__init__(dim)
        if dim < 2:
            raise ValueError("affine coupling needs at least two coordinates")
        self.hidden = hidden
        self.parity = parity % 2
        self.d_a = math.ceil(dim / 2)
        d_b = dim - self.d_a
        if self.parity == 0:
            self.a_range, self.b_range = (0, self.d_a), (self.d_a, dim)
        else:
            self.b_range, self.a_range = (0, d_b), (d_b, dim)
        if params is None:
            rng = rng if rng is not None else np.random.default_rng()
            params = {}
            for net in ("s", "t"):
                params[f"{net}.W1"] = rng.standard_normal((d_b, hidden)) / math.sqrt(d_b)
                params[f"{net}.b1"] = np.zeros(hidden)
                params[f"{net}.W2"] = rng.standard_normal((hidden, hidden)) / math.sqrt(hidden)
                params[f"{net}.b2"] = np.zeros(hidden)
                # zero output layer: the coupling starts as the identity
                params[f"{net}.W3"] = np.zeros((hidden, self.d_a))
                params[f"{net}.b3"] = np.zeros(self.d_a)
        self.params = {name: Tensor(value, requires_grad=True, name=name) for name, value in params.items()}

    def _net(self, net: str, y_b: Tensor) -> Tensor:
        p = self.params
        n = y_b.shape[0]
        h = T.tanh(y_b @ p[f"{net}.W1"] + _rows(p[f"{net}.b1"], n))
        h = T.tanh(h @ p[f"{net}.W2"] + _rows(p[f"{net}.b2"], n))
        return h @ p[f"{net}.W3"] + _rows(p[f"{net}.b3"], n)

    def _split(self, y: Tensor) -> Tuple[Tensor, Tensor]:
        return T.take(y, *self.a_range), T.take(y, *self.b_range)

    def _join(self, z_a: Tensor, z_b: Tensor) -> Tensor:
        parts = [z_a, z_b] if self.parity == 0 else [z_b, z_a]
        return T.concatenate(parts, axis=1)

    def transform(self, y):
        y = _as_batch(y, self.dim, "affine_coupling")
        y_a, y_b = self._split(y)
        raw_scale = self._net("s", y_b)
        z_a = T.exp(raw_scale) * y_a + self._net("t", y_b)
        return self._join(z_a, y_b), T.tensor_sum(raw_scale, axis=1)

    def forward(self, y):
        return self.transform(y)[0]

    def log_abs_det_jacobian(self, y):
        return self.transform(y)[1]

    def inverse(self, z):
        z = np.asarray(z, dtype=np.float64)
        with T.no_grad():
            z_b = Tensor(z[:, slice(*self.b_range)])
            scale = np.exp(self._net("s", z_b).data)
            shift = self._net("t", z_b).data
        y = z.copy()
        y[:, slice(*self.a_range)] = (z[:, slice(*self.a_range)] - shift) / scale
        return y

    def config(self):
        return {"dim": self.dim, "hidden": self.hidden, "parity": self.parity}


class LogitPreprocess(FlowLayer):
    """z = logit(lambda + (1 - 2 lambda) (y - lo) / (hi - lo)), elementwise on (lo, hi)."""

    kind = LayerKind.LOGIT_PREPROCESS

    def __init__(self, dim: int, lo: float, hi: float, lam: float = 1e-2):
        super().__init__(dim)
        if not lo < hi:
            raise ValueError(f"logit preprocess needs lo < hi, got [{lo}, {hi}]")
        if not 0.0 < lam < 0.5:
            raise ValueError(f"logit margin must lie in (0, 0.5), got {lam}")
        self.lo, self.hi, self.lam = float(lo), float(hi), float(lam)

    @property
    def _scale(self) -> float:
        return (1.0 - 2.0 * self.lam) / (self.hi - self.lo)

    def _check_domain(self, y: np.ndarray) -> None:
        below = np.argwhere(y <= self.lo)
        if below.size:
            row, col = below[0]
            raise DomainError("logit_preprocess", int(col), f"> {self.lo}", float(y[row, col]))
        above = np.argwhere(y >= self.hi)
        if above.size:
            row, col = above[0]
            raise DomainError("logit_preprocess", int(col), f"< {self.hi}", float(y[row, col]))

    def _probability(self, y: Tensor) -> Tensor:
        y = _as_batch(y, self.dim, "logit_preprocess")
        self._check_domain(y.data)
        return (y - self.lo) * self._scale + self.lam

    def forward(self, y):
        p = self._probability(y)
        return T.log(p) - T.log(1.0 - p)

    def log_abs_det_jacobian(self, y):
        p = self._probability(y)
        per_coordinate = -T.log(p) - T.log(1.0 - p) + math.log(self._scale)
        return T.tensor_sum(per_coordinate, axis=1)

    def inverse(self, z):
        p = special.expit(np.asarray(z, dtype=np.float64))
        return self.lo + (p - self.lam) / self._scale

    def config(self):
        return {"dim": self.dim, "lo": self.lo, "hi": self.hi, "lam": self.lam}


LAYER_TYPES = {
    LayerKind.ACTNORM: Actnorm,
    LayerKind.FULLY_CONNECTED: FullyConnected,
    LayerKind.SMOOTH_LEAKY_RELU: SmoothLeakyReLU,
    LayerKind.AFFINE_COUPLING: AffineCoupling,
    LayerKind.LOGIT_PREPROCESS: LogitPreprocess,
}


def layer_from_config(kind: str, config: Dict[str, Any], params: Dict[str, np.ndarray]) -> FlowLayer:
    """Rebuild a layer from its manifest entry and stored tensors."""
    layer_kind = LayerKind(kind)
    if layer_kind == LayerKind.ACTNORM:
        return Actnorm(config["dim"], params["beta"], params["gamma"], initialized=config.get("initialized", True))
    if layer_kind == LayerKind.FULLY_CONNECTED:
        return FullyConnected(config["dim"], params["W"], params["b"])
    if layer_kind == LayerKind.SMOOTH_LEAKY_RELU:
        return SmoothLeakyReLU(config["dim"], config["alpha"])
    if layer_kind == LayerKind.AFFINE_COUPLING:
        return AffineCoupling(config["dim"], config["hidden"], config["parity"], params=params)
    return LogitPreprocess(config["dim"], config["lo"], config["hi"], config.get("lam", 1e-2))
