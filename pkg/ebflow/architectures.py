"""Model builders used by the experiments."""

import logging
import math
from typing import Optional, Tuple

import numpy as np

from ebflow.flow import FlowModel
from ebflow.layers import Actnorm, AffineCoupling, FullyConnected, LogitPreprocess, SmoothLeakyReLU

logger = logging.getLogger(__name__)

WEIGHT_LAWS = ("near_identity", "gaussian")


def build_glow(
    dim: int,
    blocks: int = 10,
    hidden: int = 32,
    rng: Optional[np.random.Generator] = None,
    logit_range: Optional[Tuple[float, float]] = None,
    map_k: int = 0,
) -> FlowModel:
    """Blocks of actnorm -> fully-connected -> affine coupling, couplings alternating halves.

    With ``logit_range`` a logit preprocess layer is prepended; it is the
    layer MaP excludes when ``map_k`` is 1.
    """
    rng = rng if rng is not None else np.random.default_rng()
    layers = []
    if logit_range is not None:
        layers.append(LogitPreprocess(dim, *logit_range))
    for block in range(blocks):
        layers.append(Actnorm(dim))
        layers.append(FullyConnected(dim, rng=rng))
        layers.append(AffineCoupling(dim, hidden=hidden, parity=block % 2, rng=rng))
    logger.debug(f"Built glow flow: dim={dim}, blocks={blocks}, layers={len(layers)}")
    return FlowModel(layers, map_k=map_k)


def build_fc(
    dim: int,
    n_linear: int = 2,
    alpha: float = 0.3,
    rng: Optional[np.random.Generator] = None,
) -> FlowModel:
    """FC -> smooth leaky ReLU -> FC -> ... with ``n_linear`` fully-connected layers."""
    if n_linear < 1:
        raise ValueError(f"need at least one linear layer, got {n_linear}")
    rng = rng if rng is not None else np.random.default_rng()
    layers = [FullyConnected(dim, rng=rng)]
    for _ in range(n_linear - 1):
        layers.append(SmoothLeakyReLU(dim, alpha))
        layers.append(FullyConnected(dim, rng=rng))
    return FlowModel(layers)


def random_weight(dim: int, law: str, rng: np.random.Generator) -> np.ndarray:
    if law == "near_identity":
        return np.eye(dim) + rng.standard_normal((dim, dim)) / (20.0 * math.sqrt(dim))
    if law == "gaussian":
        return rng.standard_normal((dim, dim)) / math.sqrt(dim)
    raise ValueError(f"unknown weight law '{law}', expected one of {', '.join(WEIGHT_LAWS)}")


def build_linear_gaussian(
    dim: int, law: str = "near_identity", rng: Optional[np.random.Generator] = None
) -> FlowModel:
    """Single fully-connected layer g(x) = W x, so p(x) = N(0, (W^T W)^{-1})."""
    rng = rng if rng is not None else np.random.default_rng()
    return FlowModel([FullyConnected(dim, weight=random_weight(dim, law, rng), bias=np.zeros(dim))])


def build_from_config(config, dim: int, rng: np.random.Generator) -> FlowModel:
    """Model described by a ``TrainConfig``."""
    if config.architecture == "glow":
        return build_glow(dim, config.blocks, config.hidden, rng, config.logit_range, config.map_k)
    model = build_fc(dim, config.blocks, config.alpha, rng)
    if config.logit_range is not None:
        model = FlowModel([LogitPreprocess(dim, *config.logit_range), *model.layers], map_k=config.map_k)
    return model
