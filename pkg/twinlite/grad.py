"""
Reverse-mode differentiation.

Operations in :mod:`twinlite.ops` record themselves on the tape that is
active in the current thread. A training step looks like this:

.. highlight:: python
.. code-block:: python

    from twinlite.grad import Tape

    with Tape() as tape:
        loss = some_scalar_function(params)
    gradients = tape.backward(loss)
    gradients[params["encoder.level1.conv.weight"]]

A tape has a single writer. Each thread has its own active tape, so
independent tapes can run concurrently in different threads.
"""
import contextlib
import logging
import threading
import typing

import numpy as np

from twinlite.errors import GradientError, ShapeError
from twinlite.tensor import DOUBLE, Tensor

logger = logging.getLogger(__name__)

_local = threading.local()

BackwardFunction = typing.Callable[
    [np.ndarray], typing.Sequence[typing.Optional[np.ndarray]]
]
Gradients = typing.Dict[Tensor, np.ndarray]

# Central-difference step for double precision.
DEFAULT_STEP = 1e-5


class _TapeEntry(typing.NamedTuple):
    """A single executed operation."""

    name: str
    inputs: typing.Tuple[typing.Optional[Tensor], ...]
    output: Tensor
    backward: BackwardFunction


class Tape:
    """An ordered record of executed operations."""

    def __init__(self):
        """Create an empty tape. Use it as a context manager to activate it."""
        self.entries: typing.List[_TapeEntry] = []
        self._previous: typing.List[typing.Optional["Tape"]] = []

    def __enter__(self) -> "Tape":
        self._previous.append(current_tape())
        _local.tape = self
        return self

    def __exit__(self, *exc_info):
        _local.tape = self._previous.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def record(
        self,
        name: str,
        inputs: typing.Sequence[typing.Optional[Tensor]],
        output: Tensor,
        backward_function: BackwardFunction,
    ):
        """Append an executed operation to the tape."""
        self.entries.append(
            _TapeEntry(
                name=name,
                inputs=tuple(inputs),
                output=output,
                backward=backward_function,
            )
        )

    def backward(self, loss: Tensor) -> Gradients:
        """
        Differentiate `loss` with respect to everything recorded on the tape.

        Operations are replayed in exact reverse execution order. When a
        tensor feeds several operations, its gradients are summed.

        Args:
            loss: A one-element tensor produced by an operation on this tape.

        Returns:
            A dictionary mapping every tensor that requires a gradient and
            influences `loss` to a numpy array of the same shape.

        Raises:
            GradientError: If `loss` is not scalar or was not recorded here.
        """
        if loss.size != 1:
            raise GradientError(
                f"backward() needs a scalar loss, got shape {loss.shape}"
            )
        if not any(entry.output is loss for entry in self.entries):
            raise GradientError(
                "The loss was not produced on this tape. Compute it inside "
                "the `with Tape()` block from tensors that require gradients."
            )
        slots: typing.Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owners: typing.Dict[int, Tensor] = {id(loss): loss}
        for entry in reversed(self.entries):
            upstream = slots.get(id(entry.output))
            if upstream is None:
                continue
            input_gradients = entry.backward(upstream)
            for tensor, gradient in zip(entry.inputs, input_gradients):
                if tensor is None or gradient is None or not tensor.requires_grad:
                    continue
                if gradient.shape != tensor.shape:
                    raise ShapeError(
                        f"{entry.name} produced a gradient of shape "
                        f"{gradient.shape} for a tensor of shape {tensor.shape}"
                    )
                key = id(tensor)
                if key in slots:
                    slots[key] = slots[key] + gradient
                else:
                    slots[key] = gradient
                    owners[key] = tensor
        return {owners[key]: gradient for key, gradient in slots.items()}


def current_tape() -> typing.Optional[Tape]:
    """Return the tape active in this thread, if any."""
    return getattr(_local, "tape", None)


@contextlib.contextmanager
def no_grad():
    """Suspend recording in this thread for the duration of the block."""
    previous = current_tape()
    _local.tape = None
    try:
        yield
    finally:
        _local.tape = previous


def record(
    name: str,
    inputs: typing.Sequence[typing.Optional[Tensor]],
    output: Tensor,
    backward_function: BackwardFunction,
) -> Tensor:
    """
    Record an operation on the active tape when any input needs a gradient.

    Returns:
        `output`, marked as requiring a gradient if it was recorded.
    """
    tape = current_tape()
    if tape is None:
        return output
    if not any(tensor is not None and tensor.requires_grad for tensor in inputs):
        return output
    output.requires_grad = True
    tape.record(name, inputs, output, backward_function)
    return output


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Functional spelling of :meth:`Tape.backward`."""
    return tape.backward(loss)


class GradCheckReport(typing.NamedTuple):
    """The outcome of comparing analytic and numeric gradients."""

    op: str
    max_relative_error: float
    checked: int

    def passed(self, tolerance: float) -> bool:
        """Whether every checked element is within `tolerance`."""
        return self.checked > 0 and self.max_relative_error < tolerance


def gradcheck(
    func: typing.Callable[..., Tensor],
    inputs: typing.Union[Tensor, typing.Sequence[Tensor]],
    *,
    step: float = DEFAULT_STEP,
    samples: typing.Optional[int] = None,
    seed: int = 0,
    min_magnitude: float = 0.0,
    name: typing.Optional[str] = None,
) -> GradCheckReport:
    """
    Compare reverse-mode gradients against central finite differences.

    Each checked element ``x_i`` contributes the relative error
    ``|a - n| / max(|a|, |n|, 1e-8)`` where ``a`` is the analytic gradient and
    ``n = (f(x + h e_i) - f(x - h e_i)) / (2h)``.

    Args:
        func: Called as ``func(*inputs)``; must return a one-element tensor.
        inputs: One tensor or a sequence of tensors, all double precision.
        step: The finite-difference step `h`.
        samples: When set, check a seeded random subsample of this many
            elements instead of all of them.
        seed: Seed for the subsample.
        min_magnitude: When positive, only elements whose analytic gradient
            is at least this large are eligible. Finite differences cannot
            resolve gradients near the round-off floor.
        name: Label for the report. Defaults to the function name.

    Returns:
        A :class:`GradCheckReport`.

    Raises:
        GradientError: If an input is single precision or `func` is not
            scalar-valued.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for tensor in inputs:
        if tensor.dtype != DOUBLE:
            raise GradientError(
                "gradcheck needs double-precision inputs; single precision "
                f"round-off swamps the finite differences ({tensor!r})"
            )
    flags = [tensor.requires_grad for tensor in inputs]
    for tensor in inputs:
        tensor.requires_grad = True
    try:
        with Tape() as tape:
            output = func(*inputs)
        gradients = tape.backward(output)

        candidates = []
        for position, tensor in enumerate(inputs):
            analytic = gradients.get(tensor, np.zeros_like(tensor.data)).reshape(-1)
            for index in range(tensor.size):
                if abs(analytic[index]) >= min_magnitude:
                    candidates.append((position, index, float(analytic[index])))
        if samples is not None and len(candidates) > samples:
            chosen = np.random.default_rng(seed).choice(
                len(candidates), size=samples, replace=False
            )
            candidates = [candidates[i] for i in sorted(chosen)]

        worst = 0.0
        with no_grad():
            for position, index, analytic_value in candidates:
                flat = inputs[position].flat
                original = flat[index]
                flat[index] = original + step
                plus = func(*inputs).item()
                flat[index] = original - step
                minus = func(*inputs).item()
                flat[index] = original
                numeric = (plus - minus) / (2.0 * step)
                denominator = max(abs(analytic_value), abs(numeric), 1e-8)
                worst = max(worst, abs(analytic_value - numeric) / denominator)
    finally:
        for tensor, flag in zip(inputs, flags):
            tensor.requires_grad = flag
    report = GradCheckReport(
        op=name or getattr(func, "__name__", "function"),
        max_relative_error=worst,
        checked=len(candidates),
    )
    logger.debug("gradcheck %s", report)
    return report
