"""
Dense tensors in NCHW layout.

A :class:`Tensor` is a thin wrapper around a C-contiguous :mod:`numpy` array.
It carries a precision tag (``"single"`` or ``"double"``) and a
``requires_grad`` flag that tells :mod:`twinlite.ops` whether to record the
operation on the active :class:`twinlite.grad.Tape`.

Activations are ``N, C, H, W``; convolution weights are ``O, I/groups, Kh, Kw``;
transposed-convolution weights are ``I, O, Kh, Kw``.
"""
import typing

import numpy as np

from twinlite.errors import ShapeError, TwinLiteValidationError

SINGLE = "single"
DOUBLE = "double"

_NUMPY_DTYPES = {SINGLE: np.float32, DOUBLE: np.float64}

Shape = typing.Tuple[int, ...]


def numpy_dtype(dtype: str) -> type:
    """Return the numpy scalar type for a precision tag."""
    try:
        return _NUMPY_DTYPES[dtype]
    except KeyError:
        raise TwinLiteValidationError(
            f"Unknown precision {dtype!r}. Use {SINGLE!r} or {DOUBLE!r}."
        ) from None


class Tensor:
    """An N-dimensional float array with an optional gradient requirement.

    Tensors compare and hash by identity, so they can key gradient maps.
    """

    def __init__(
        self,
        data: typing.Any,
        *,
        dtype: typing.Optional[str] = None,
        requires_grad: bool = False,
        name: typing.Optional[str] = None,
    ):
        """
        Create a tensor.

        Args:
            data: Anything :func:`numpy.asarray` accepts.
            dtype: ``"single"`` or ``"double"``. When omitted, float64 input
                stays double precision and everything else becomes single.
            requires_grad: Whether operations on this tensor are recorded for
                reverse-mode differentiation.
            name: Optional label used in diagnostics.

        Raises:
            ShapeError: If any dimension has size zero.
        """
        array = np.asarray(data)
        if dtype is None:
            dtype = DOUBLE if array.dtype == np.float64 else SINGLE
        self.data = np.ascontiguousarray(array, dtype=numpy_dtype(dtype))
        if any(size < 1 for size in self.data.shape):
            raise ShapeError(
                f"Every dimension must be at least 1, got shape {self.data.shape}"
                + (f" for {name!r}" if name else "")
            )
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Shape:
        """The dimension sizes."""
        return self.data.shape

    @property
    def ndim(self) -> int:
        """The number of dimensions."""
        return self.data.ndim

    @property
    def size(self) -> int:
        """The number of elements."""
        return int(self.data.size)

    @property
    def dtype(self) -> str:
        """The precision tag."""
        return DOUBLE if self.data.dtype == np.float64 else SINGLE

    @property
    def flat(self) -> np.ndarray:
        """A writable, row-major, one-dimensional view of the data."""
        return self.data.reshape(-1)

    def item(self) -> float:
        """Return the value of a one-element tensor as a Python float."""
        if self.size != 1:
            raise ShapeError(f"item() needs exactly one element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Return a copy of the data."""
        return self.data.copy()

    def astype(self, dtype: str) -> "Tensor":
        """Return a copy with another precision, keeping the gradient flag."""
        return Tensor(
            self.data, dtype=dtype, requires_grad=self.requires_grad, name=self.name
        )

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype!r})"


def zeros(shape: Shape, dtype: str = SINGLE, **kwargs) -> Tensor:
    """Create a zero-filled tensor."""
    return Tensor(np.zeros(shape, dtype=numpy_dtype(dtype)), dtype=dtype, **kwargs)


def ones(shape: Shape, dtype: str = SINGLE, **kwargs) -> Tensor:
    """Create a one-filled tensor."""
    return Tensor(np.ones(shape, dtype=numpy_dtype(dtype)), dtype=dtype, **kwargs)


class ConvParams(typing.NamedTuple):
    """Stride, symmetric zero padding, dilation and group count of a convolution."""

    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def validate(self) -> "ConvParams":
        """Check the ranges of every field and return self.

        Raises:
            TwinLiteValidationError: If a field is out of range.
        """
        if self.stride < 1:
            raise TwinLiteValidationError(f"stride must be >= 1, got {self.stride}")
        if self.dilation < 1:
            raise TwinLiteValidationError(f"dilation must be >= 1, got {self.dilation}")
        if self.padding < 0:
            raise TwinLiteValidationError(f"padding must be >= 0, got {self.padding}")
        if self.groups < 1:
            raise TwinLiteValidationError(f"groups must be >= 1, got {self.groups}")
        return self


def conv_output_size(
    size: int,
    kernel: int,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    *,
    dimension: str = "output size",
) -> int:
    """
    Shape inference shared by convolution and pooling.

    ``floor((size + 2*padding - dilation*(kernel-1) - 1) / stride) + 1``

    Raises:
        ShapeError: If the result is not positive. The message names
            `dimension`.
    """
    out = (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1
    if out <= 0:
        raise ShapeError(
            f"{dimension} would be {out} (input {size}, kernel {kernel}, "
            f"stride {stride}, padding {padding}, dilation {dilation})"
        )
    return out
