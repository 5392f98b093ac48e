"""
Streaming confusion counts and the segmentation scores derived from them.

Accumulators count pixels in a ``classes x classes`` confusion matrix (rows are
ground truth, columns are predictions). Counting is order-independent, so
accumulators built over shards in parallel merge by addition into exactly the
whole-dataset result.
"""
import typing

import numpy as np

from twinlite.errors import ShapeError, TwinLiteValidationError
from twinlite.tensor import Tensor


class ConfusionAccumulator:
    """Per-class TP/FP/FN/TN pixel counts."""

    def __init__(self, classes: int = 2):
        if classes < 1:
            raise TwinLiteValidationError(f"need at least one class, got {classes}")
        self.classes = classes
        self.matrix = np.zeros((classes, classes), dtype=np.int64)

    def update(self, pred_mask: np.ndarray, gt_mask: np.ndarray) -> "ConfusionAccumulator":
        """
        Count every pixel of a prediction against its ground truth.

        Raises:
            ShapeError: If the masks differ in shape.
            TwinLiteValidationError: If a value is not a valid class index.
        """
        pred_mask = np.asarray(pred_mask)
        gt_mask = np.asarray(gt_mask)
        if pred_mask.shape != gt_mask.shape:
            raise ShapeError(f"shape: prediction {pred_mask.shape} vs ground truth {gt_mask.shape}")
        for label, mask in (("prediction", pred_mask), ("ground truth", gt_mask)):
            if mask.size and (mask.min() < 0 or mask.max() >= self.classes):
                raise TwinLiteValidationError(
                    f"{label} holds values outside [0, {self.classes - 1}]"
                )
        index = gt_mask.astype(np.int64).ravel() * self.classes + pred_mask.astype(np.int64).ravel()
        self.matrix += np.bincount(index, minlength=self.classes ** 2).reshape(
            self.classes, self.classes
        )
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        """Return a new accumulator holding the counts of both."""
        if other.classes != self.classes:
            raise TwinLiteValidationError(
                f"cannot merge {self.classes}-class and {other.classes}-class accumulators"
            )
        merged = ConfusionAccumulator(self.classes)
        merged.matrix = self.matrix + other.matrix
        return merged

    @property
    def total(self) -> int:
        """Pixels seen."""
        return int(self.matrix.sum())

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.matrix).copy()

    @property
    def fp(self) -> np.ndarray:
        return self.matrix.sum(axis=0) - np.diag(self.matrix)

    @property
    def fn(self) -> np.ndarray:
        return self.matrix.sum(axis=1) - np.diag(self.matrix)

    @property
    def tn(self) -> np.ndarray:
        return self.total - self.tp - self.fp - self.fn

    def iou(self, cls: int) -> float:
        """
        ``TP / (TP + FP + FN)`` for one class.

        A class that never occurs and is never predicted scores 1.0.
        """
        if not 0 <= cls < self.classes:
            raise TwinLiteValidationError(f"class {cls} is not in [0, {self.classes - 1}]")
        tp = int(self.tp[cls])
        union = tp + int(self.fp[cls]) + int(self.fn[cls])
        return 1.0 if union == 0 else tp / union

    def miou(self) -> float:
        """Unweighted mean of the per-class IoUs."""
        return float(np.mean([self.iou(cls) for cls in range(self.classes)]))

    def pixel_accuracy(self) -> float:
        """Fraction of correctly classified pixels."""
        return 1.0 if self.total == 0 else int(np.trace(self.matrix)) / self.total


def update(
    acc: ConfusionAccumulator, pred_mask: np.ndarray, gt_mask: np.ndarray
) -> ConfusionAccumulator:
    """Functional spelling of :meth:`ConfusionAccumulator.update`."""
    return acc.update(pred_mask, gt_mask)


def iou(acc: ConfusionAccumulator, cls: int) -> float:
    """Functional spelling of :meth:`ConfusionAccumulator.iou`."""
    return acc.iou(cls)


def miou(acc: ConfusionAccumulator) -> float:
    """Functional spelling of :meth:`ConfusionAccumulator.miou`."""
    return acc.miou()


def argmax_mask(logits: typing.Union[Tensor, np.ndarray]) -> np.ndarray:
    """
    Per-pixel class index of an ``N, C, H, W`` score map.

    Ties go to the lower class index (background).
    """
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if data.ndim != 4 or data.shape[1] < 2:
        raise ShapeError(f"argmax_mask needs N, C>=2, H, W scores, got {data.shape}")
    return data.argmax(axis=1)


def render_report(scores: typing.Sequence[typing.Tuple[str, float]]) -> str:
    """
    Render ``(label, fraction)`` pairs as a plain-text table of percentages.

    .. code-block:: text

        Metric                 Score
        ------------------  --------
        Drivable area mIoU    91.30%
        Lane IoU              31.08%
    """
    width = max([len("Metric")] + [len(label) for label, _ in scores])
    lines = [f"{'Metric':<{width}}  {'Score':>8}", f"{'-' * width}  {'-' * 8}"]
    for label, fraction in scores:
        lines.append(f"{label:<{width}}  {fraction * 100:>7.2f}%")
    return "\n".join(lines)
