"""Flow model with the energy-based factorization log p(x) = -E(x) - log Z.

The energy collects the prior term and the log-determinants of the
non-linear layers; log Z collects the (input independent) log-determinants
of the linear layers with a minus sign. Score-based objectives only ever
touch the energy, so they never factorize a weight matrix.
"""

import logging
import math
from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from ebflow import tensor as T
from ebflow.errors import EBFlowError, InversionError, ShapeError, SingularMatrixError
from ebflow.layers import Actnorm, FlowLayer
from ebflow.tensor import Tensor

logger = logging.getLogger(__name__)

PRIOR = "standard_normal"


def prior_log_pdf(u: np.ndarray) -> np.ndarray:
    """log N(u | 0, I) row-wise."""
    d = u.shape[1]
    return -(0.5 * np.sum(u * u, axis=1) + 0.5 * d * math.log(2.0 * math.pi))


def _prior_energy(z: Tensor) -> Tensor:
    d = z.shape[1]
    return T.squared_norm(z, axis=1) * 0.5 + 0.5 * d * math.log(2.0 * math.pi)


class EnergyReport(BaseModel):
    """Energy, log-partition and log-density of one point"""

    energy: float = Field(description="E(x)")
    log_z: Optional[float] = Field(default=None, description="log Z, or None when not evaluated")
    logp: Optional[float] = Field(default=None, description="-E(x) - log Z when log Z is present")


def as_batch(x: Union[Tensor, np.ndarray, Sequence[float]]) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.ndim == 2 else x.reshape(1, x.size)
    arr = np.asarray(x, dtype=np.float64)
    return Tensor(arr.reshape(1, -1) if arr.ndim == 1 else arr)


class ParameterVersion:
    """Update counter shared by a model and every view over its layers"""

    def __init__(self) -> None:
        self.value = 0

    def bump(self) -> None:
        self.value += 1


class FlowModel:
    """g = g_L o ... o g_1 with a standard normal prior.

    ``map_k`` is the number of leading layers that MaP treats as
    preprocessing. ``log_partition`` is cached and must be invalidated with
    ``mark_updated`` after every parameter change.
    """

    def __init__(self, layers: Sequence[FlowLayer], map_k: int = 0, version: Optional[ParameterVersion] = None):
        layers = list(layers)
        if not layers:
            raise ValueError("a flow needs at least one layer")
        dims = {layer.dim for layer in layers}
        if len(dims) != 1:
            raise ShapeError("flow", [(layer.dim,) for layer in layers], "every layer must share one dimension")
        if not 0 <= map_k < len(layers):
            raise ValueError(f"map_k must satisfy 0 <= k < L={len(layers)}, got {map_k}")
        self.layers: List[FlowLayer] = layers
        self.map_k = map_k
        self.prior = PRIOR
        self._version = version if version is not None else ParameterVersion()
        self._log_z_cache: Optional[Tuple[int, float]] = None

    @property
    def dim(self) -> int:
        return self.layers[0].dim

    def __len__(self) -> int:
        return len(self.layers)

    def __repr__(self) -> str:
        body = ", ".join(repr(layer) for layer in self.layers)
        return f"FlowModel([{body}], map_k={self.map_k})"

    def parameters(self) -> Dict[str, Tensor]:
        params = {}
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                params[f"layers.{i}.{name}"] = value
        return params

    def parameter_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_parameter_arrays(self, values: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(values)
        if missing:
            raise KeyError(f"missing parameters: {', '.join(sorted(missing))}")
        for name, p in params.items():
            value = np.asarray(values[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError("load_parameters", [p.shape, value.shape], name)
            p.data = value.copy()
        self.mark_updated()

    @contextmanager
    def swapped_parameters(self, values: Dict[str, np.ndarray]) -> Iterator["FlowModel"]:
        """Temporarily evaluate the model at other parameters (e.g. EMA shadows)."""
        saved = self.parameter_arrays()
        self.load_parameter_arrays(values)
        try:
            yield self
        finally:
            self.load_parameter_arrays(saved)

    def mark_updated(self) -> None:
        self._version.bump()

    def forward(self, x) -> Tensor:
        z = as_batch(x)
        for layer in self.layers:
            z = layer.forward(z)
        return z

    def energy(self, x) -> Tensor:
        """E(x) per sample, shape (N,); linear layers only contribute their map."""
        z = as_batch(x)
        nonlinear_ldj = None
        for layer in self.layers:
            if layer.is_linear:
                z = layer.forward(z)
                continue
            z, ldj = layer.transform(z)
            nonlinear_ldj = ldj if nonlinear_ldj is None else nonlinear_ldj + ldj
        energy = _prior_energy(z)
        return energy if nonlinear_ldj is None else energy - nonlinear_ldj

    def log_partition_tensor(self) -> Tensor:
        """log Z = -sum of linear-layer log|det J|, on the tape."""
        total = Tensor(0.0)
        for layer in self.layers:
            if layer.is_linear:
                total = total - layer.log_abs_det()
        return total

    def log_partition(self) -> float:
        """Cached log Z for evaluation; recomputed after ``mark_updated``."""
        if self._log_z_cache is None or self._log_z_cache[0] != self._version.value:
            with T.no_grad():
                value = self.log_partition_tensor().item()
            self._log_z_cache = (self._version.value, value)
            logger.debug(f"log Z recomputed: {value:.6f}")
        return self._log_z_cache[1]

    def log_prob(self, x, track_partition: bool = False) -> Tensor:
        """-E(x) - log Z. With ``track_partition`` log Z stays on the tape."""
        if track_partition:
            return -self.energy(x) - self.log_partition_tensor()
        return -self.energy(x) - self.log_partition()

    def log_prob_direct(self, x) -> Tensor:
        """Change of variables evaluated layer by layer, without the factorization."""
        z = as_batch(x)
        total = None
        for layer in self.layers:
            z, ldj = layer.transform(z)
            total = ldj if total is None else total + ldj
        return total - _prior_energy(z)

    def energy_report(self, x, with_partition: bool = True) -> EnergyReport:
        with T.no_grad():
            energy = self.energy(as_batch(x)).data
        if energy.size != 1:
            raise ShapeError("energy_report", [energy.shape], "expected a single point")
        value = float(energy[0])
        if not with_partition:
            return EnergyReport(energy=value)
        log_z = self.log_partition()
        return EnergyReport(energy=value, log_z=log_z, logp=-value - log_z)

    def energy_gradient(self, x: Tensor, create_graph: bool = False) -> Tensor:
        """dE/dx for a leaf batch ``x``; differentiable again with ``create_graph``."""
        if not x.requires_grad:
            raise EBFlowError("energy_gradient needs a leaf tensor with requires_grad=True")
        (g,) = T.grad(T.tensor_sum(self.energy(x)), [x], create_graph=create_graph)
        return g

    def score(self, x, create_graph: bool = False) -> Tensor:
        """-dE/dx, which equals the gradient of log p since log Z is constant in x."""
        leaf = x if isinstance(x, Tensor) and x.requires_grad else Tensor(as_batch(x).data, requires_grad=True)
        return -self.energy_gradient(leaf, create_graph=create_graph)

    def map_split(self) -> Tuple["FlowModel", "FlowModel"]:
        """(preprocess over layers 1..k, head over layers k+1..L).

        Both share parameters and the update counter with this model, so
        ``mark_updated`` on any of the three invalidates every cached log Z.
        """
        if self.map_k == 0:
            raise EBFlowError("MaP requested with no preprocess layers")
        return (
            FlowModel(self.layers[: self.map_k], version=self._version),
            FlowModel(self.layers[self.map_k :], version=self._version),
        )

    def inverse(self, z: np.ndarray) -> np.ndarray:
        x = np.asarray(z, dtype=np.float64)
        for index in reversed(range(len(self.layers))):
            try:
                x = self.layers[index].inverse(x)
            except InversionError as e:
                raise InversionError(
                    e.message, residual=e.residual, iterations=e.iterations, layer_index=index
                ) from e
            except SingularMatrixError as e:
                raise InversionError(f"singular layer ({e})", layer_index=index) from e
        return x

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.inverse(rng.standard_normal((n, self.dim)))

    def initialize(self, batch: np.ndarray) -> None:
        """Data-dependent initialisation of every actnorm layer not yet initialised."""
        z = np.asarray(batch, dtype=np.float64)
        with T.no_grad():
            for layer in self.layers:
                if isinstance(layer, Actnorm) and not layer.initialized:
                    layer.initialize(z)
                z = layer.forward(Tensor(z)).data
        self.mark_updated()

    def layer_manifest(self) -> List[Dict[str, object]]:
        return [
            {"kind": layer.kind.value, "dim": layer.dim, "set": layer.set_tag, "config": layer.config()}
            for layer in self.layers
        ]
