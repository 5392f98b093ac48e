"""
Segmentation losses: focal, Tversky, their per-head sum and the model objective.

Both losses take per-pixel class probabilities and a one-hot target of the same
``N, C, H, W`` shape, and are recorded on the active tape as single operations
with analytic gradients with respect to the probabilities.
"""
import logging
import typing

import numpy as np

from twinlite import ops
from twinlite.errors import ConfigError, ShapeError, TwinLiteValidationError
from twinlite.grad import record
from twinlite.tensor import Tensor

logger = logging.getLogger(__name__)

# Probabilities are clamped to [PROBABILITY_CLAMP, 1 - PROBABILITY_CLAMP] inside the log.
PROBABILITY_CLAMP = 1e-7

# Largest tolerated deviation of a pixel's probabilities from summing to 1.
NORMALIZATION_TOLERANCE = 1e-4


class LossConfig(typing.NamedTuple):
    """Hyper-parameters of the per-head loss."""

    gamma: float = 2.0
    alpha: float = 0.7
    beta: float = 0.3
    smooth: float = 1.0

    def validate(self) -> "LossConfig":
        """Check the ranges and return self."""
        if self.gamma < 0:
            raise ConfigError(f"focal gamma must be >= 0, got {self.gamma}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(
                f"Tversky alpha and beta must be >= 0, got {self.alpha} and {self.beta}"
            )
        if self.smooth <= 0:
            raise ConfigError(f"smooth must be > 0, got {self.smooth}")
        return self


class SoftCounts(typing.NamedTuple):
    """Per-class probability-mass true positives, false negatives and false positives."""

    tp: np.ndarray
    fn: np.ndarray
    fp: np.ndarray


class ModelLoss(typing.NamedTuple):
    """The training objective and its per-head terms."""

    total: Tensor
    heads: typing.Tuple[Tensor, ...]


def _check_inputs(probs: Tensor, target: Tensor):
    if probs.ndim != 4:
        raise ShapeError(f"probabilities must be N, C, H, W, got {probs.shape}")
    if probs.shape != target.shape:
        raise ShapeError(f"shape: probabilities {probs.shape} vs target {target.shape}")
    deviation = np.abs(probs.data.sum(axis=1) - 1.0).max()
    if deviation > NORMALIZATION_TOLERANCE:
        raise TwinLiteValidationError(
            "probabilities must sum to 1 over the class axis; the worst pixel is "
            f"off by {deviation:.3g}"
        )


def soft_counts(probs: Tensor, target: Tensor) -> SoftCounts:
    """Soft TP, FN and FP per class, summed over batch and pixels."""
    axes = (0, 2, 3)
    p, t = probs.data, target.data
    return SoftCounts(
        tp=(p * t).sum(axis=axes),
        fn=((1 - p) * t).sum(axis=axes),
        fp=(p * (1 - t)).sum(axis=axes),
    )


def focal_loss(probs: Tensor, target: Tensor, gamma: float = 2.0) -> Tensor:
    """
    Focal loss averaged over the pixels of each image, then over the batch.

    ``-(1 / (N * H * W)) * sum_c sum_i t_i(c) (1 - p_i(c))^gamma log p_i(c)``

    Raises:
        ShapeError: If the shapes differ.
        TwinLiteValidationError: If the probabilities are not normalized.
    """
    _check_inputs(probs, target)
    batch, _, height, width = probs.shape
    scale = 1.0 / (batch * height * width)
    p, t = probs.data, target.data
    clipped = np.clip(p, PROBABILITY_CLAMP, 1 - PROBABILITY_CLAMP)
    inside = (p >= PROBABILITY_CLAMP) & (p <= 1 - PROBABILITY_CLAMP)
    log_p = np.log(clipped)
    modulation = (1 - clipped) ** gamma
    value = -scale * (t * modulation * log_p).sum()

    def backward(grad: np.ndarray):
        slope = -gamma * (1 - clipped) ** (gamma - 1) * log_p + modulation / clipped
        return (-scale * grad * t * slope * inside, None)

    return record("focal_loss", (probs, target), Tensor(np.asarray(value, dtype=p.dtype)), backward)


def tversky_loss(
    probs: Tensor,
    target: Tensor,
    alpha: float = 0.7,
    beta: float = 0.3,
    smooth: float = 1.0,
) -> Tensor:
    """
    Tversky loss summed over classes.

    ``sum_c 1 - (TP + s) / (TP + alpha FN + beta FP + s)`` with soft counts
    over the whole batch.

    Raises:
        ShapeError: If the shapes differ.
        TwinLiteValidationError: If the probabilities are not normalized.
    """
    _check_inputs(probs, target)
    counts = soft_counts(probs, target)
    numerator = counts.tp + smooth
    denominator = counts.tp + alpha * counts.fn + beta * counts.fp + smooth
    value = (1 - numerator / denominator).sum()
    t = target.data

    def view(array):
        return array.reshape(1, -1, 1, 1)

    def backward(grad: np.ndarray):
        d_denominator = t - alpha * t + beta * (1 - t)
        d_ratio = (t * view(denominator) - view(numerator) * d_denominator) / view(
            denominator ** 2
        )
        return (-grad * d_ratio, None)

    return record(
        "tversky_loss",
        (probs, target),
        Tensor(np.asarray(value, dtype=probs.data.dtype)),
        backward,
    )


def head_loss(probs: Tensor, target: Tensor, config: LossConfig = LossConfig()) -> Tensor:
    """Focal plus Tversky loss for one head, unweighted."""
    config.validate()
    return ops.add(
        focal_loss(probs, target, config.gamma),
        tversky_loss(probs, target, config.alpha, config.beta, config.smooth),
    )


def model_loss(
    logits: typing.Sequence[Tensor],
    targets: typing.Sequence[Tensor],
    config: LossConfig = LossConfig(),
) -> ModelLoss:
    """
    The training objective: the sum of the head losses with weight 1 each.

    Args:
        logits: The model outputs, ``(drivable, lane)`` or a single 3-class map.
        targets: One-hot targets in the same order.
        config: Loss hyper-parameters.

    Raises:
        TwinLiteValidationError: If a head or its target is missing.
    """
    if len(logits) not in (1, 2) or len(logits) != len(targets):
        raise TwinLiteValidationError(
            f"missing head: got {len(logits)} outputs and {len(targets)} targets; "
            "expected two of each, or one of each for the single-head model"
        )
    heads = tuple(
        head_loss(ops.softmax_channels(head_logits), target, config)
        for head_logits, target in zip(logits, targets)
    )
    total = heads[0]
    for term in heads[1:]:
        total = ops.add(total, term)
    return ModelLoss(total=total, heads=heads)
