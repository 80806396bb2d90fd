"""Run configuration, environment settings and logging setup."""

import logging
import os
from enum import Enum
from typing import Any, Dict, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ebflow.errors import ConfigError

# Load environment variables
load_dotenv()

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


def configure_logging(level: Optional[str] = None) -> None:
    """Set up root logging once for command-line runs."""
    level = level or Settings.from_env().log_level
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT)


class Settings(BaseModel):
    """Process-level settings taken from the environment"""

    threads: int = Field(default=1, ge=1, description="Worker count for sharded evaluation (EBFLOW_THREADS)")
    log_level: str = Field(default="INFO", description="Root log level (EBFLOW_LOG_LEVEL)")

    @classmethod
    def from_env(cls) -> "Settings":
        return cls(
            threads=int(os.getenv("EBFLOW_THREADS", "1")),
            log_level=os.getenv("EBFLOW_LOG_LEVEL", "INFO"),
        )


class ObjectiveKind(str, Enum):
    ML = "ml"
    SML = "sml"
    SM_EXACT = "sm_exact"
    SSM = "ssm"
    DSM = "dsm"
    FDSSM = "fdssm"


class Projection(str, Enum):
    RADEMACHER = "rademacher"
    GAUSSIAN = "gaussian"


class OptimizerKind(str, Enum):
    ADAM = "adam"
    ADAMW = "adamw"
    RMSPROP = "rmsprop"


class ObjectiveConfig(BaseModel):
    """Training objective and its hyperparameters"""

    model_config = ConfigDict(extra="forbid")

    kind: ObjectiveKind = Field(description="Which loss to minimise")
    sigma: Optional[float] = Field(default=None, gt=0, description="DSM noise standard deviation")
    xi: Optional[float] = Field(default=None, gt=0, description="FDSSM perturbation radius")
    n_v: int = Field(default=1, ge=1, description="SSM projections per sample")
    projection: Projection = Field(default=Projection.RADEMACHER, description="SSM projection law")

    @model_validator(mode="after")
    def _check_required_hyperparameters(self) -> "ObjectiveConfig":
        if self.kind == ObjectiveKind.DSM and self.sigma is None:
            raise ValueError("objective 'dsm' requires 'sigma'")
        if self.kind == ObjectiveKind.FDSSM and self.xi is None:
            raise ValueError("objective 'fdssm' requires 'xi'")
        return self


# (optimizer, learning rate, gradient clip) selected per dataset and objective
# for the two-dimensional experiments.
RECOMMENDED_HYPERPARAMETERS: Dict[Tuple[str, str], Tuple[str, float, Optional[float]]] = {
    ("sine", "ml"): ("adam", 5e-4, 1.0),
    ("sine", "sml"): ("adamw", 5e-4, None),
    ("sine", "ssm"): ("adam", 1e-4, 1.0),
    ("sine", "dsm"): ("adam", 1e-4, 1.0),
    ("sine", "fdssm"): ("adam", 1e-4, 1.0),
    ("swirl", "ml"): ("adam", 5e-3, None),
    ("swirl", "sml"): ("adam", 1e-4, 10.0),
    ("swirl", "ssm"): ("adam", 1e-4, 10.0),
    ("swirl", "dsm"): ("adam", 1e-4, 10.0),
    ("swirl", "fdssm"): ("adam", 1e-4, 2.5),
    ("checkerboard", "ml"): ("adamw", 1e-4, 10.0),
    ("checkerboard", "sml"): ("adamw", 1e-4, 10.0),
    ("checkerboard", "ssm"): ("adamw", 1e-4, 10.0),
    ("checkerboard", "dsm"): ("adamw", 1e-4, 10.0),
    ("checkerboard", "fdssm"): ("adam", 1e-4, 10.0),
}
DEFAULT_HYPERPARAMETERS: Tuple[str, float, Optional[float]] = ("adam", 1e-4, 10.0)


def recommended_hyperparameters(dataset: str, objective: str) -> Tuple[str, float, Optional[float]]:
    return RECOMMENDED_HYPERPARAMETERS.get((dataset, objective), DEFAULT_HYPERPARAMETERS)


class TrainConfig(BaseModel):
    """The flat JSON document describing one training run"""

    model_config = ConfigDict(extra="forbid", use_enum_values=False)

    dataset: str = Field(default="sine", description="sine, swirl, checkerboard or gauss-D")
    M: int = Field(default=2000, ge=1, description="Number of mixture centers of the data oracle")
    sigma_hat: float = Field(default=0.375, gt=0, description="Bandwidth of the data oracle")
    data_source: str = Field(default="smoothed", description="smoothed (center + noise) or dequantized (bounded)")
    dequantize_scale: float = Field(default=0.05, ge=0, description="Uniform dequantization bin width")

    architecture: str = Field(default="glow", description="glow (2D experiments) or fc")
    blocks: int = Field(default=10, ge=1, description="Glow blocks, or linear layers for fc")
    hidden: int = Field(default=32, ge=1, description="Width of the coupling networks")
    alpha: float = Field(default=0.3, gt=0, le=1, description="Smooth leaky ReLU smoothness")
    logit_range: Optional[Tuple[float, float]] = Field(
        default=None, description="Prepend a logit preprocess layer over [lo, hi]"
    )

    objective: ObjectiveKind = Field(default=ObjectiveKind.SSM, description="Training objective")
    sigma: Optional[float] = Field(default=None, gt=0, description="DSM noise std")
    xi: Optional[float] = Field(default=None, gt=0, description="FDSSM step")
    n_v: int = Field(default=1, ge=1, description="SSM projections per sample")
    projection: Projection = Field(default=Projection.RADEMACHER, description="SSM projection law")

    optimizer: Optional[OptimizerKind] = Field(default=None, description="adam, adamw or rmsprop")
    lr: Optional[float] = Field(default=None, gt=0, description="Learning rate")
    grad_clip: Optional[float] = Field(default=None, gt=0, description="Global gradient-norm threshold")
    weight_decay: float = Field(default=1e-2, ge=0, description="AdamW decoupled weight decay")
    batch_size: int = Field(default=5000, ge=1, description="Batch size N")
    iterations: int = Field(default=50000, ge=0, description="Training iterations")
    ema_momentum: float = Field(default=0.999, ge=0, le=1, description="EMA momentum m")
    map_k: int = Field(default=0, ge=0, description="Leading layers excluded by MaP; 0 disables MaP")
    seed: int = Field(default=0, description="Seed of every random stream of the run")

    eval_every: int = Field(default=500, ge=1, description="Metric cadence in steps")
    eval_samples: int = Field(default=2000, ge=0, description="Monte Carlo samples per in-training evaluation")
    checkpoint_every: int = Field(default=5000, ge=1, description="Checkpoint cadence in steps")
    log_wall_time: bool = Field(default=False, description="Write the wall_ms metric column (makes metrics.csv differ run to run)")

    @field_validator("dataset")
    @classmethod
    def _check_dataset(cls, value: str) -> str:
        from ebflow.datasets import parse_dataset

        parse_dataset(value)
        return value

    @field_validator("data_source")
    @classmethod
    def _check_data_source(cls, value: str) -> str:
        if value not in ("smoothed", "dequantized"):
            raise ValueError("data_source must be 'smoothed' or 'dequantized'")
        return value

    @field_validator("architecture")
    @classmethod
    def _check_architecture(cls, value: str) -> str:
        if value not in ("glow", "fc"):
            raise ValueError("architecture must be 'glow' or 'fc'")
        return value

    @field_validator("logit_range")
    @classmethod
    def _check_logit_range(cls, value: Optional[Tuple[float, float]]) -> Optional[Tuple[float, float]]:
        if value is not None and not value[0] < value[1]:
            raise ValueError("logit_range needs lo < hi")
        return value

    @model_validator(mode="after")
    def _fill_and_check(self) -> "TrainConfig":
        self.objective_config()
        optimizer, lr, clip = recommended_hyperparameters(self.dataset, self.objective.value)
        if self.optimizer is None:
            self.optimizer = OptimizerKind(optimizer)
            if self.grad_clip is None:
                self.grad_clip = clip
        if self.lr is None:
            self.lr = lr
        if self.logit_range is not None:
            self._check_logit_covers_data()
        if self.map_k and self.logit_range is None:
            raise ValueError("map_k > 0 requires 'logit_range' (the preprocess layer MaP excludes)")
        if self.map_k > 1:
            raise ValueError("map_k must be 0 or 1: the only preprocess layer is the logit layer")
        return self

    def _check_logit_covers_data(self) -> None:
        from ebflow.datasets import dequantized_support, parse_dataset

        if self.data_source != "dequantized":
            raise ValueError(
                "logit_range needs data_source 'dequantized': smoothed data is unbounded and leaves any logit range"
            )
        lo, hi = self.logit_range
        support_lo, support_hi = dequantized_support(parse_dataset(self.dataset), self.dequantize_scale)
        if not (lo < support_lo and support_hi < hi):
            raise ValueError(
                f"logit_range [{lo}, {hi}] does not cover the {self.dataset} data support [{support_lo}, {support_hi}]"
            )

    def objective_config(self) -> ObjectiveConfig:
        return ObjectiveConfig(
            kind=self.objective, sigma=self.sigma, xi=self.xi, n_v=self.n_v, projection=self.projection
        )

    @classmethod
    def valid_keys(cls):
        return list(cls.model_fields)

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> "TrainConfig":
        unknown = sorted(set(document) - set(cls.model_fields))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}", cls.valid_keys())
        try:
            return cls.model_validate(document)
        except ValidationError as e:
            problems = "; ".join(
                f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in e.errors()
            )
            raise ConfigError(f"invalid config ({problems})", cls.valid_keys()) from e


class LangevinConfig(BaseModel):
    """Unadjusted Langevin imputation settings"""

    step_size: float = Field(default=1e-2, ge=0, description="Step size alpha")
    iterations: int = Field(default=1000, ge=1, description="Number of Langevin steps T")
    thin: int = Field(default=0, ge=0, description="Keep every thin-th state in the trajectory; 0 keeps none")
    seed: int = Field(default=0, description="Chain seed")


class ISConfig(BaseModel):
    """Importance-sampling estimate of the partition function"""

    samples: int = Field(default=200, ge=1, description="Number of proposal draws M")
    seed: int = Field(default=0, description="Proposal seed")
    batch_size: int = Field(default=10000, ge=1, description="Energy evaluations per chunk")
