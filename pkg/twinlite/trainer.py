"""
The training loop and evaluation passes.

.. highlight:: python
.. code-block:: python

    from twinlite import data, trainer
    from twinlite.model import ModelConfig, TwinLiteNet

    samples = data.synth_generate(16, seed=7, size=(64, 64))
    model = TwinLiteNet(ModelConfig(input_width=64, input_height=64), seed=7)
    result = trainer.train(model, samples, trainer.TrainConfig(epochs=20, batch_size=8))
    result.history.write_csv("history.csv")
"""
import csv
import logging
import math
import typing

import numpy as np

from twinlite import data
from twinlite.checkpoint import save_checkpoint
from twinlite.errors import ConfigError, TrainingDivergedError, TwinLiteValidationError
from twinlite.grad import Tape, no_grad
from twinlite.losses import LossConfig, model_loss
from twinlite.metrics import ConfusionAccumulator, argmax_mask, render_report
from twinlite.model import SINGLE_HEAD, TwinLiteNet
from twinlite.optim import AdamConfig, OptimState, ScheduleConfig, adam_step, lr_at

logger = logging.getLogger(__name__)

POLY = "poly"

HISTORY_COLUMNS = ("epoch", "lr", "loss_total", "loss_da", "loss_lane")


class TrainConfig(typing.NamedTuple):
    """Optimization settings."""

    epochs: int = 100
    batch_size: int = 32
    lr: float = 5e-4
    schedule: str = POLY
    power: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0

    def validate(self) -> "TrainConfig":
        """
        Raises:
            ConfigError: On the first out-of-range field.
        """
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if self.schedule != POLY:
            raise ConfigError(f"unknown schedule {self.schedule!r}; only {POLY!r} is supported")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"Adam betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        return self

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig(self.beta1, self.beta2, self.eps)

    @property
    def poly(self) -> ScheduleConfig:
        return ScheduleConfig(self.lr, self.epochs, self.power)


class EpochRecord(typing.NamedTuple):
    """Sample-weighted mean losses of one epoch. Single-head runs leave `loss_lane` empty."""

    epoch: int
    lr: float
    loss_total: float
    loss_da: float
    loss_lane: typing.Optional[float]


class History:
    """Per-epoch records of a training run."""

    def __init__(self):
        self.records: typing.List[EpochRecord] = []

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: EpochRecord):
        self.records.append(record)

    @property
    def losses(self) -> typing.List[float]:
        """Total loss per epoch."""
        return [record.loss_total for record in self.records]

    def write_csv(self, path: str):
        """Write the history with the columns of :data:`HISTORY_COLUMNS`."""
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(HISTORY_COLUMNS)
            for record in self.records:
                writer.writerow(
                    ["" if value is None else repr(value) for value in record]
                )


class TrainResult(typing.NamedTuple):
    """What :func:`train` hands back."""

    history: History
    state: OptimState


def train(
    model: TwinLiteNet,
    samples: typing.Sequence[data.Sample],
    config: TrainConfig = TrainConfig(),
    *,
    loss_config: LossConfig = LossConfig(),
    checkpoint_path: typing.Optional[str] = None,
    state: typing.Optional[OptimState] = None,
) -> TrainResult:
    """
    Train `model` in place.

    Every batch runs forward, loss, backward and one Adam step with batch norms
    in training mode. Batches are shuffled per epoch from ``(seed, epoch)``, so
    equal inputs give bit-identical histories and weights.

    Args:
        model: Updated in place and left in inference mode.
        samples: Preprocessed training samples at the model input size.
        config: Optimization settings.
        loss_config: Loss hyper-parameters.
        checkpoint_path: When set, a checkpoint is written here every
            ``config.checkpoint_every`` epochs and after the last one.
        state: Optimizer state to continue from.

    Raises:
        TwinLiteValidationError: If `samples` is empty or has the wrong size.
        TrainingDivergedError: If a batch loss is not finite.
    """
    config.validate()
    if not samples:
        raise TwinLiteValidationError("cannot train on an empty dataset")
    expected = (model.config.input_width, model.config.input_height)
    if samples[0].size != expected:
        raise TwinLiteValidationError(
            f"samples are {samples[0].size[0]}x{samples[0].size[1]}, the model "
            f"expects {expected[0]}x{expected[1]}"
        )
    if model.config.fused:
        raise ConfigError("a fused model has no batch norms left to train")
    params = model.parameters()
    for tensor in params.values():
        tensor.requires_grad = True
    if state is None:
        state = OptimState.zeros(params)
    history = History()
    model.train()
    try:
        for epoch in range(config.epochs):
            lr = lr_at(epoch, config.poly)
            totals = np.zeros(1 + len(model.config.head_names))
            seen = 0
            batches = data.batch_iter(
                samples,
                config.batch_size,
                seed=config.seed,
                epoch=epoch,
                head_mode=model.config.head_mode,
            )
            for batch_index, batch in enumerate(batches):
                with Tape() as tape:
                    losses = model_loss(model(batch.images), batch.targets, loss_config)
                value = losses.total.item()
                if not math.isfinite(value):
                    raise TrainingDivergedError(
                        f"loss became {value} at epoch {epoch + 1}, batch {batch_index + 1}"
                    )
                gradients = tape.backward(losses.total)
                adam_step(
                    params,
                    {name: gradients.get(tensor) for name, tensor in params.items()},
                    state,
                    lr,
                    config.adam,
                )
                count = len(batch.ids)
                totals += count * np.array([value] + [head.item() for head in losses.heads])
                seen += count
                logger.debug("epoch %d batch %d loss %.6f", epoch + 1, batch_index + 1, value)
            means = totals / seen
            record = EpochRecord(
                epoch=epoch + 1,
                lr=lr,
                loss_total=float(means[0]),
                loss_da=float(means[1]),
                loss_lane=float(means[2]) if len(means) > 2 else None,
            )
            history.append(record)
            logger.info(
                "epoch %d/%d lr %.3g loss %.6f (da %.6f, lane %s)",
                record.epoch,
                config.epochs,
                lr,
                record.loss_total,
                record.loss_da,
                "-" if record.loss_lane is None else f"{record.loss_lane:.6f}",
            )
            last = epoch + 1 == config.epochs
            periodic = config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0
            if checkpoint_path and (last or periodic):
                save_checkpoint(model, checkpoint_path, state=state)
    finally:
        model.eval()
        for tensor in params.values():
            tensor.requires_grad = False
    return TrainResult(history=history, state=state)


class EvalResult(typing.NamedTuple):
    """Drivable-area and lane scores on thin labels."""

    da_miou: float
    lane_iou: float
    da: ConfusionAccumulator
    lane: ConfusionAccumulator

    @property
    def lane_accuracy(self) -> float:
        """Fraction of pixels whose lane/background label is right."""
        return self.lane.pixel_accuracy()

    def report(self) -> str:
        """The scores as a plain-text percentage table."""
        return render_report(
            [
                ("Drivable area mIoU", self.da_miou),
                ("Lane accuracy", self.lane_accuracy),
                ("Lane IoU", self.lane_iou),
            ]
        )


def predict_masks(model: TwinLiteNet, images) -> typing.Tuple[np.ndarray, np.ndarray]:
    """
    Binary drivable and lane masks for a batch of images.

    For the single-head model class 1 or 2 counts as drivable and class 2 as lane.
    """
    with no_grad():
        outputs = model(images)
    if model.config.head_mode == SINGLE_HEAD:
        classes = argmax_mask(outputs[0])
        return (classes > 0).astype(np.uint8), (classes == 2).astype(np.uint8)
    return (
        argmax_mask(outputs[0]).astype(np.uint8),
        argmax_mask(outputs[1]).astype(np.uint8),
    )


def evaluate(
    model: typing.Optional[TwinLiteNet],
    samples: typing.Sequence[data.Sample],
    *,
    batch_size: int = 8,
    oracle: bool = False,
) -> EvalResult:
    """
    Score a model on samples in inference mode.

    Args:
        model: The model; ignored in oracle mode.
        samples: Preprocessed without lane dilation.
        batch_size: Images per forward pass.
        oracle: Score the ground truth against itself.
    """
    if model is None and not oracle:
        raise TwinLiteValidationError("evaluation needs a model unless it runs in oracle mode")
    da = ConfusionAccumulator(2)
    lane = ConfusionAccumulator(2)
    if not oracle:
        model.eval()
    for batch in data.batch_iter(samples, batch_size, shuffle=False):
        if oracle:
            da_pred, lane_pred = batch.da_masks, batch.lane_masks
        else:
            da_pred, lane_pred = predict_masks(model, batch.images)
        da.update(da_pred, batch.da_masks)
        lane.update(lane_pred, batch.lane_masks)
    return EvalResult(da_miou=da.miou(), lane_iou=lane.iou(1), da=da, lane=lane)
