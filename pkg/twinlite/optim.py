"""Adam with bias correction and the polynomial learning-rate schedule."""
import typing

import numpy as np

from twinlite.errors import ShapeError, TwinLiteValidationError
from twinlite.tensor import Tensor


class AdamConfig(typing.NamedTuple):
    """Adam moment decay rates and the denominator epsilon."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class ScheduleConfig(typing.NamedTuple):
    """Polynomial decay from `lr` over `epochs`."""

    lr: float = 5e-4
    epochs: int = 100
    power: float = 0.9


class OptimState:
    """First and second moments per parameter name, plus the step count."""

    def __init__(
        self,
        m: typing.Dict[str, np.ndarray],
        v: typing.Dict[str, np.ndarray],
        step: int = 0,
    ):
        if set(m) != set(v):
            raise TwinLiteValidationError("first and second moments must cover the same parameters")
        self.m = m
        self.v = v
        self.step = step

    @classmethod
    def zeros(cls, params: typing.Mapping[str, Tensor]) -> "OptimState":
        """Fresh state for `params`."""
        return cls(
            m={name: np.zeros_like(tensor.data) for name, tensor in params.items()},
            v={name: np.zeros_like(tensor.data) for name, tensor in params.items()},
        )


def lr_at(epoch: int, schedule: ScheduleConfig) -> float:
    """
    ``lr * (1 - epoch / epochs) ** power``.

    Raises:
        TwinLiteValidationError: Unless ``0 <= epoch < epochs``.
    """
    if not 0 <= epoch < schedule.epochs:
        raise TwinLiteValidationError(
            f"epoch {epoch} is outside the schedule [0, {schedule.epochs})"
        )
    return schedule.lr * (1.0 - epoch / schedule.epochs) ** schedule.power


def adam_step(
    params: typing.Mapping[str, Tensor],
    grads: typing.Mapping[str, typing.Optional[np.ndarray]],
    state: OptimState,
    lr: float,
    config: AdamConfig = AdamConfig(),
) -> OptimState:
    """
    Apply one Adam update to `params` in place.

    A parameter without a gradient is treated as having a zero gradient.

    Raises:
        ShapeError: If a gradient or moment does not match its parameter.
    """
    if lr < 0:
        raise TwinLiteValidationError(f"learning rate must be >= 0, got {lr}")
    for name, tensor in params.items():
        grad = grads.get(name)
        if grad is not None and grad.shape != tensor.shape:
            raise ShapeError(f"{name}: gradient {grad.shape} vs parameter {tensor.shape}")
        if name not in state.m or state.m[name].shape != tensor.shape:
            raise ShapeError(f"{name}: optimizer state does not match the parameter")
    state.step += 1
    correction1 = 1.0 - config.beta1 ** state.step
    correction2 = 1.0 - config.beta2 ** state.step
    for name, tensor in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(tensor.data)
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * grad
        v *= config.beta2
        v += (1.0 - config.beta2) * grad * grad
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + config.eps)
        tensor.data -= update.astype(tensor.data.dtype)
    return state
