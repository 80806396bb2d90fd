"""Training loop: optimizers, clipping, EMA shadows, MaP routing, metrics and checkpoints."""

import logging
import math
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from ebflow import tensor as T
from ebflow.checkpoint import save_checkpoint
from ebflow.config import OptimizerKind, TrainConfig
from ebflow.datasets import DataSource, Oracle
from ebflow.errors import DomainError, ShapeError, TrainingDivergedError
from ebflow.evaluation import evaluate
from ebflow.flow import FlowModel
from ebflow.objectives import compute_loss
from ebflow.tensor import Tensor

logger = logging.getLogger(__name__)


class Optimizer(ABC):
    def __init__(self, lr: float):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.t = 0

    @abstractmethod
    def update(self, name: str, value: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """New value of one parameter."""

    def step(self, params: Dict[str, Tensor], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, p in params.items():
            p.data = self.update(name, p.data, grads[name])


class Adam(Optimizer):
    def __init__(self, lr: float, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        super().__init__(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def update(self, name, value, grad):
        m = self.beta1 * self.m.get(name, np.zeros_like(value)) + (1.0 - self.beta1) * grad
        v = self.beta2 * self.v.get(name, np.zeros_like(value)) + (1.0 - self.beta2) * grad * grad
        self.m[name], self.v[name] = m, v
        m_hat = m / (1.0 - self.beta1**self.t)
        v_hat = v / (1.0 - self.beta2**self.t)
        return value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class AdamW(Adam):
    """Adam with decoupled weight decay."""

    def __init__(self, lr: float, weight_decay: float = 1e-2, **kwargs):
        super().__init__(lr, **kwargs)
        self.weight_decay = weight_decay

    def update(self, name, value, grad):
        return super().update(name, value * (1.0 - self.lr * self.weight_decay), grad)


class RMSProp(Optimizer):
    def __init__(self, lr: float, alpha: float = 0.99, eps: float = 1e-8):
        super().__init__(lr)
        self.alpha = alpha
        self.eps = eps
        self.sq: Dict[str, np.ndarray] = {}

    def update(self, name, value, grad):
        sq = self.alpha * self.sq.get(name, np.zeros_like(value)) + (1.0 - self.alpha) * grad * grad
        self.sq[name] = sq
        return value - self.lr * grad / (np.sqrt(sq) + self.eps)


def build_optimizer(kind: OptimizerKind, lr: float, weight_decay: float = 1e-2) -> Optimizer:
    kind = OptimizerKind(kind)
    if kind == OptimizerKind.ADAM:
        return Adam(lr)
    if kind == OptimizerKind.ADAMW:
        return AdamW(lr, weight_decay=weight_decay)
    return RMSProp(lr)


def ema_update(ema: Dict[str, np.ndarray], params: Dict[str, np.ndarray], m: float) -> Dict[str, np.ndarray]:
    """theta~ <- m theta~ + (1 - m) theta, elementwise."""
    if set(ema) != set(params):
        raise ShapeError("ema_update", [(len(ema),), (len(params),)], "parameter manifests differ")
    updated = {}
    for name, shadow in ema.items():
        value = np.asarray(params[name])
        if shadow.shape != value.shape:
            raise ShapeError("ema_update", [shadow.shape, value.shape], name)
        updated[name] = m * shadow + (1.0 - m) * value
    return updated


class EmaState:
    """Shadow parameters mirroring a model's parameter manifest."""

    def __init__(self, params: Dict[str, np.ndarray], momentum: float = 0.999):
        if momentum == 1.0:
            logger.warning("EMA momentum is 1: shadow parameters will never move")
        self.momentum = momentum
        self.shadow = {name: np.array(value, dtype=np.float64) for name, value in params.items()}

    def update(self, params: Dict[str, np.ndarray]) -> None:
        self.shadow = ema_update(self.shadow, params, self.momentum)


def clip_gradient(
    grads: Dict[str, np.ndarray], threshold: Optional[float]
) -> Tuple[Dict[str, np.ndarray], float]:
    """Global-norm clipping g * min(1, threshold / |g|); returns the clipped gradient and |g|."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if threshold is None or norm <= threshold or norm == 0.0:
        return grads, norm
    scale = threshold / norm
    return {name: g * scale for name, g in grads.items()}, norm


@dataclass
class TrainState:
    model: FlowModel
    optimizer: Optimizer
    ema: EmaState
    rng: np.random.Generator
    step: int = 0
    losses: List[float] = field(default_factory=list)
    grad_norms: List[float] = field(default_factory=list)
    metrics: List[Dict[str, float]] = field(default_factory=list)
    last_checkpoint: Optional[Path] = None

    def metrics_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.metrics)


def _trainable(model: FlowModel, k: int) -> Dict[str, Tensor]:
    return {name: p for name, p in model.parameters().items() if int(name.split(".")[1]) >= k}


def _append_metrics(path: Path, row: Dict[str, float]) -> None:
    pd.DataFrame([row]).to_csv(path, mode="a", header=not path.exists(), index=False)


def _evaluate_ema(model: FlowModel, ema: EmaState, oracle: Oracle, n: int, seed: int, step: int) -> Tuple[float, float]:
    rng = np.random.default_rng([seed, step])
    try:
        with model.swapped_parameters(ema.shadow):
            report = evaluate(oracle, model, n=n, rng=rng)
    except DomainError as e:
        logger.warning(f"In-training evaluation skipped at step {step}, metrics recorded as NaN: {e}")
        return math.nan, math.nan
    return report.kl, report.fisher


def train(
    model: FlowModel,
    source: DataSource,
    config: TrainConfig,
    oracle: Optional[Oracle] = None,
    out_dir: Optional[Path] = None,
    progress: bool = False,
) -> TrainState:
    """Run ``config.iterations`` steps of batch -> loss -> backward -> clip -> step -> EMA.

    With ``out_dir`` the metric CSV and checkpoints are written there.
    Raises TrainingDivergedError on a non-finite loss or gradient.
    """
    rng = np.random.default_rng(config.seed)
    objective = config.objective_config()
    k = config.map_k
    if model.map_k != k:
        raise ValueError(f"model was built with map_k={model.map_k} but the config asks for {k}")
    metrics_path = checkpoint_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.csv"
        checkpoint_dir = out_dir / "checkpoints"

    if config.iterations > 0:
        model.initialize(source.batch(config.batch_size, rng))
    preprocess, head = model.map_split() if k else (None, model)
    params = _trainable(model, k)
    state = TrainState(
        model=model,
        optimizer=build_optimizer(config.optimizer, config.lr, config.weight_decay),
        ema=EmaState(model.parameter_arrays(), config.ema_momentum),
        rng=rng,
    )
    if checkpoint_dir is not None:
        state.last_checkpoint = save_checkpoint(model, checkpoint_dir / "step_000000.ebf", seed=config.seed)

    logger.info(
        f"Training {config.objective.value} on {config.dataset} for {config.iterations} steps "
        f"(optimizer {config.optimizer.value}, lr {config.lr}, clip {config.grad_clip}, MaP k={k})"
    )
    interval_start = time.perf_counter()
    for step in tqdm(range(1, config.iterations + 1), disable=not progress, desc="train"):
        batch = source.batch(config.batch_size, rng)
        if preprocess is not None:
            with T.no_grad():
                batch = preprocess.forward(batch).data
        report = compute_loss(head, batch, objective, rng)
        loss = report.value
        grads = dict(zip(params, (g.data for g in T.grad(report.loss, list(params.values())))))
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            checkpoint = str(state.last_checkpoint) if state.last_checkpoint else None
            raise TrainingDivergedError(step, loss, checkpoint)
        grads, norm = clip_gradient(grads, config.grad_clip)
        state.optimizer.step(params, grads)
        model.mark_updated()
        state.ema.update(model.parameter_arrays())
        state.step = step
        state.losses.append(loss)
        state.grad_norms.append(norm)
        logger.debug(f"step {step}: loss {loss:.6f}, grad norm {norm:.4f}")

        if step % config.eval_every == 0 or step == config.iterations:
            kl = fisher = math.nan
            if oracle is not None and config.eval_samples > 0:
                kl, fisher = _evaluate_ema(model, state.ema, oracle, config.eval_samples, config.seed, step)
            row = {"step": step, "loss": loss, "grad_norm": norm, "kl": kl, "fisher": fisher}
            if config.log_wall_time:
                now = time.perf_counter()
                row["wall_ms"] = (now - interval_start) * 1e3
                interval_start = now
            state.metrics.append(row)
            if metrics_path is not None:
                _append_metrics(metrics_path, row)
            logger.info(f"step {step}: loss {loss:.5f}, grad norm {norm:.3f}, KL {kl:.4f}, Fisher {fisher:.4e}")

        if checkpoint_dir is not None and step % config.checkpoint_every == 0:
            state.last_checkpoint = save_checkpoint(model, checkpoint_dir / f"step_{step:06d}.ebf", seed=config.seed)

    if out_dir is not None and config.iterations > 0:
        save_checkpoint(model, out_dir / "final.ebf", seed=config.seed)
        save_checkpoint(model, out_dir / "final_ema.ebf", seed=config.seed, parameters=state.ema.shadow)
    logger.info(f"Training finished after {state.step} steps")
    return state
