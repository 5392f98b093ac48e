"""
Differentiable tensor operations.

Every operation is a pure function of its inputs (batch norm's running
statistics are the one exception, and they are owned and passed by the caller).
The forward pass is computed with :mod:`numpy`; when the active
:class:`twinlite.grad.Tape` is recording and an input requires a gradient, the
operation also records a closure mapping the output gradient to input
gradients.

Reductions always run in a fixed order, so results are bit-reproducible for a
fixed input. Matrix products and inference-mode batch norm accumulate in double
precision and round once to the input precision on output.
"""
import typing

import numpy as np

from twinlite.errors import ShapeError, TwinLiteValidationError
from twinlite.grad import record
from twinlite.tensor import ConvParams, Tensor, conv_output_size

# Batch-norm defaults, fixed so that fusion tests are reproducible.
BN_EPS = 1e-3
BN_MOMENTUM = 0.1


def _require(condition: bool, message: str):
    if not condition:
        raise ShapeError(message)


def _window(count: int, stride: int, offset: int) -> slice:
    """The strided slice that visits `count` positions starting at `offset`."""
    return slice(offset, offset + stride * (count - 1) + 1, stride)


def _channel_view(array: np.ndarray, ndim: int) -> np.ndarray:
    """Reshape a per-channel vector so it lines up with axis 1 of an ndim array."""
    return array.reshape((1, -1) + (1,) * (ndim - 2))


def _wide(array: np.ndarray) -> np.ndarray:
    return array.astype(np.float64, copy=False)


def _check_4d(tensor: Tensor, what: str):
    _require(
        tensor.ndim == 4,
        f"{what} must be 4-D (N, C, H, W), got shape {tensor.shape}",
    )


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: typing.Optional[Tensor] = None,
    params: ConvParams = ConvParams(),
) -> Tensor:
    """
    2-D cross-correlation with stride, symmetric zero padding, dilation and groups.

    ``out[n,o,y,x] = bias[o] + sum_{i,ky,kx} in[n,i,y*s-p+ky*d, x*s-p+kx*d] * w[o,i,ky,kx]``

    Args:
        x: Input of shape ``N, Cin, H, W``.
        weight: Kernel of shape ``Cout, Cin/groups, Kh, Kw``.
        bias: Optional tensor of shape ``Cout``.
        params: Stride, padding, dilation and groups.

    Returns:
        A tensor of shape ``N, Cout, H', W'``.

    Raises:
        ShapeError: On any shape mismatch or a non-positive output size.
    """
    params.validate()
    _check_4d(x, "conv2d input")
    _check_4d(weight, "conv2d weight")
    n, channels, height, width = x.shape
    out_channels, group_channels, kernel_h, kernel_w = weight.shape
    groups = params.groups
    _require(
        channels % groups == 0,
        f"input channels ({channels}) are not divisible by groups ({groups})",
    )
    _require(
        channels // groups == group_channels,
        f"input channels: the input has {channels // groups} per group but "
        f"the weight expects {group_channels}",
    )
    _require(
        out_channels % groups == 0,
        f"output channels ({out_channels}) are not divisible by groups ({groups})",
    )
    if bias is not None:
        _require(
            bias.shape == (out_channels,),
            f"bias length {bias.shape} does not match output channels {out_channels}",
        )
    stride, padding, dilation = params.stride, params.padding, params.dilation
    out_h = conv_output_size(
        height, kernel_h, stride, padding, dilation, dimension="output height"
    )
    out_w = conv_output_size(
        width, kernel_w, stride, padding, dilation, dimension="output width"
    )

    dtype = np.result_type(x.data, weight.data)
    padded = np.zeros(
        (n, channels, height + 2 * padding, width + 2 * padding), dtype=dtype
    )
    padded[:, :, padding : padding + height, padding : padding + width] = x.data
    columns = np.empty((n, channels, kernel_h, kernel_w, out_h, out_w), dtype=dtype)
    for ky in range(kernel_h):
        for kx in range(kernel_w):
            columns[:, :, ky, kx] = padded[
                :,
                :,
                _window(out_h, stride, ky * dilation),
                _window(out_w, stride, kx * dilation),
            ]

    group_out = out_channels // groups
    patch = group_channels * kernel_h * kernel_w
    positions = out_h * out_w
    columns = columns.reshape(n, groups, patch, positions)
    kernel = weight.data.astype(dtype, copy=False).reshape(groups, group_out, patch)
    out = np.empty((n, groups, group_out, positions))
    for group in range(groups):
        out[:, group] = np.matmul(_wide(kernel[group]), _wide(columns[:, group]))
    out = out.reshape(n, out_channels, out_h, out_w)
    if bias is not None:
        out += _channel_view(_wide(bias.data), 4)
    out = out.astype(dtype)

    def backward(grad: np.ndarray):
        grad_out = grad.reshape(n, groups, group_out, positions)
        grad_kernel = np.empty_like(kernel)
        grad_columns = np.empty_like(columns)
        for group in range(groups):
            grad_kernel[group] = np.matmul(
                grad_out[:, group], columns[:, group].transpose(0, 2, 1)
            ).sum(axis=0)
            grad_columns[:, group] = np.matmul(kernel[group].T, grad_out[:, group])
        grad_columns = grad_columns.reshape(
            n, channels, kernel_h, kernel_w, out_h, out_w
        )
        grad_padded = np.zeros_like(padded)
        for ky in range(kernel_h):
            for kx in range(kernel_w):
                grad_padded[
                    :,
                    :,
                    _window(out_h, stride, ky * dilation),
                    _window(out_w, stride, kx * dilation),
                ] += grad_columns[:, :, ky, kx]
        grad_x = grad_padded[:, :, padding : padding + height, padding : padding + width]
        grad_bias = grad.sum(axis=(0, 2, 3)) if bias is not None else None
        return (
            np.ascontiguousarray(grad_x),
            grad_kernel.reshape(weight.shape),
            grad_bias,
        )

    return record("conv2d", (x, weight, bias), Tensor(out), backward)


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: typing.Optional[Tensor] = None,
    stride: int = 1,
) -> Tensor:
    """
    Transposed convolution without padding (the adjoint of :func:`conv2d`).

    Every input pixel scatter-adds ``x[n,i,y,x] * w[i,:,:,:]`` into the output
    window starting at ``(y*stride, x*stride)``.

    Args:
        x: Input of shape ``N, Cin, H, W``.
        weight: Kernel of shape ``Cin, Cout, Kh, Kw``.
        bias: Optional tensor of shape ``Cout``.
        stride: Output stride.

    Returns:
        A tensor of shape ``N, Cout, (H-1)*stride + Kh, (W-1)*stride + Kw``,
        which is ``N, Cout, H*stride, W*stride`` when the kernel equals the
        stride.

    Raises:
        ShapeError: On a shape mismatch.
    """
    if stride < 1:
        raise TwinLiteValidationError(f"stride must be >= 1, got {stride}")
    _check_4d(x, "conv_transpose2d input")
    _check_4d(weight, "conv_transpose2d weight")
    n, channels, height, width = x.shape
    weight_in, out_channels, kernel_h, kernel_w = weight.shape
    _require(
        channels == weight_in,
        f"input channels: the input has {channels} but the weight expects {weight_in}",
    )
    if bias is not None:
        _require(
            bias.shape == (out_channels,),
            f"bias length {bias.shape} does not match output channels {out_channels}",
        )
    out_h = (height - 1) * stride + kernel_h
    out_w = (width - 1) * stride + kernel_w

    dtype = np.result_type(x.data, weight.data)
    kernel = weight.data.astype(dtype, copy=False).reshape(
        channels, out_channels * kernel_h * kernel_w
    )
    flat_x = x.data.astype(dtype, copy=False).reshape(n, channels, height * width)
    columns = np.matmul(_wide(kernel.T), _wide(flat_x)).reshape(
        n, out_channels, kernel_h, kernel_w, height, width
    )
    out = np.zeros((n, out_channels, out_h, out_w))
    for ky in range(kernel_h):
        for kx in range(kernel_w):
            out[:, :, _window(height, stride, ky), _window(width, stride, kx)] += columns[
                :, :, ky, kx
            ]
    if bias is not None:
        out += _channel_view(_wide(bias.data), 4)
    out = out.astype(dtype)

    def backward(grad: np.ndarray):
        gathered = np.empty((n, out_channels, kernel_h, kernel_w, height, width), dtype=dtype)
        for ky in range(kernel_h):
            for kx in range(kernel_w):
                gathered[:, :, ky, kx] = grad[
                    :, :, _window(height, stride, ky), _window(width, stride, kx)
                ]
        gathered = gathered.reshape(n, out_channels * kernel_h * kernel_w, height * width)
        grad_x = np.matmul(kernel, gathered).reshape(x.shape)
        grad_kernel = (
            np.matmul(flat_x, gathered.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        )
        grad_bias = grad.sum(axis=(0, 2, 3)) if bias is not None else None
        return grad_x, grad_kernel, grad_bias

    return record("conv_transpose2d", (x, weight, bias), Tensor(out), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    *,
    eps: float = BN_EPS,
    training: bool = False,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """
    Per-channel batch normalization over N, H and W.

    In training mode the batch statistics normalize the input and the running
    statistics are updated in place:
    ``running = (1 - momentum) * running + momentum * batch`` (the running
    variance uses the unbiased batch variance). In inference mode only the
    running statistics are read.

    The backward pass differentiates through the batch statistics.

    Raises:
        ShapeError: If a statistics tensor does not have one entry per channel.
    """
    _require(x.ndim >= 2, f"batch_norm input needs a channel axis, got {x.shape}")
    if eps < 0:
        raise TwinLiteValidationError(f"eps must be >= 0, got {eps}")
    channels = x.shape[1]
    for label, tensor in (
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ):
        _require(
            tensor.shape == (channels,),
            f"channels: batch_norm {label} has shape {tensor.shape}, "
            f"the input has {channels} channels",
        )
    axes = (0,) + tuple(range(2, x.ndim))
    count = x.size // channels

    def view(array):
        return _channel_view(array, x.ndim)

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / (count - 1) if count > 1 else var
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mean
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * unbiased
    else:
        mean = running_mean.data
        var = running_var.data
    inv_std = 1.0 / np.sqrt(var + eps)
    normalized = (x.data - view(mean)) * view(inv_std)
    if training:
        out = normalized * view(gamma.data) + view(beta.data)
    else:
        scale = view(_wide(gamma.data) / np.sqrt(_wide(var) + eps))
        out = ((_wide(x.data) - view(_wide(mean))) * scale + view(_wide(beta.data))).astype(
            x.data.dtype
        )

    def backward(grad: np.ndarray):
        grad_beta = grad.sum(axis=axes)
        grad_gamma = (grad * normalized).sum(axis=axes)
        grad_normalized = grad * view(gamma.data)
        if training:
            grad_x = (
                view(inv_std)
                / count
                * (
                    count * grad_normalized
                    - view(grad_normalized.sum(axis=axes))
                    - normalized * view((grad_normalized * normalized).sum(axis=axes))
                )
            )
        else:
            grad_x = grad_normalized * view(inv_std)
        return grad_x, grad_gamma, grad_beta, None, None

    return record(
        "batch_norm",
        (x, gamma, beta, running_mean, running_var),
        Tensor(out),
        backward,
    )


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """
    Parametric ReLU with one slope per channel.

    ``out = x if x >= 0 else slope[c] * x``. The gradient at ``x == 0`` uses the
    non-negative branch.
    """
    _require(x.ndim >= 2, f"prelu input needs a channel axis, got {x.shape}")
    _require(
        slope.shape == (x.shape[1],),
        f"channels: prelu slope has shape {slope.shape}, the input has "
        f"{x.shape[1]} channels",
    )
    axes = (0,) + tuple(range(2, x.ndim))
    factor = _channel_view(slope.data, x.ndim)
    positive = x.data >= 0
    out = np.where(positive, x.data, factor * x.data)

    def backward(grad: np.ndarray):
        grad_x = np.where(positive, grad, factor * grad)
        grad_slope = np.where(positive, 0.0, grad * x.data).sum(axis=axes)
        return grad_x, grad_slope.astype(slope.data.dtype)

    return record("prelu", (x, slope), Tensor(out), backward)


def avg_pool2d(x: Tensor, kernel: int, stride: typing.Optional[int] = None) -> Tensor:
    """Window mean without padding. `stride` defaults to `kernel`."""
    stride = kernel if stride is None else stride
    if kernel < 1 or stride < 1:
        raise TwinLiteValidationError(
            f"kernel and stride must be >= 1, got {kernel} and {stride}"
        )
    _check_4d(x, "avg_pool2d input")
    height, width = x.shape[2:]
    out_h = conv_output_size(height, kernel, stride, dimension="output height")
    out_w = conv_output_size(width, kernel, stride, dimension="output width")
    area = kernel * kernel
    out = np.zeros(x.shape[:2] + (out_h, out_w), dtype=x.data.dtype)
    for ky in range(kernel):
        for kx in range(kernel):
            out += x.data[:, :, _window(out_h, stride, ky), _window(out_w, stride, kx)]
    out /= area

    def backward(grad: np.ndarray):
        grad_x = np.zeros_like(x.data)
        share = grad / area
        for ky in range(kernel):
            for kx in range(kernel):
                grad_x[
                    :, :, _window(out_h, stride, ky), _window(out_w, stride, kx)
                ] += share
        return (grad_x,)

    return record("avg_pool2d", (x,), Tensor(out), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis` (max-subtraction)."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    out = exps / exps.sum(axis=axis, keepdims=True)

    def backward(grad: np.ndarray):
        return (out * (grad - (grad * out).sum(axis=axis, keepdims=True)),)

    return record("softmax", (x,), Tensor(out), backward)


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis of an ``N, C, H, W`` tensor."""
    _check_4d(x, "softmax_channels input")
    return softmax(x, axis=1)


def rowmax_minus(x: Tensor) -> Tensor:
    """``max(x, axis=-1) - x``, used by channel attention before its softmax.

    At ties the gradient of the maximum goes to the first maximal element.
    """
    argmax = x.data.argmax(axis=-1)[..., None]
    out = np.take_along_axis(x.data, argmax, axis=-1) - x.data

    def backward(grad: np.ndarray):
        grad_x = -grad
        np.put_along_axis(
            grad_x,
            argmax,
            np.take_along_axis(grad_x, argmax, axis=-1) + grad.sum(axis=-1, keepdims=True),
            axis=-1,
        )
        return (grad_x,)

    return record("rowmax_minus", (x,), Tensor(out), backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product of ``B, M, K`` and ``B, K, P`` tensors."""
    _require(a.ndim == 3 and b.ndim == 3, f"bmm needs 3-D tensors, got {a.shape} and {b.shape}")
    _require(a.shape[0] == b.shape[0], f"batch: {a.shape[0]} vs {b.shape[0]}")
    _require(
        a.shape[2] == b.shape[1],
        f"inner dimension: {a.shape[2]} vs {b.shape[1]}",
    )
    out = np.matmul(_wide(a.data), _wide(b.data)).astype(np.result_type(a.data, b.data))

    def backward(grad: np.ndarray):
        return (
            np.matmul(grad, b.data.transpose(0, 2, 1)),
            np.matmul(a.data.transpose(0, 2, 1), grad),
        )

    return record("bmm", (a, b), Tensor(out), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two tensors of equal shape."""
    _require(a.shape == b.shape, f"shape: add of {a.shape} and {b.shape}")

    def backward(grad: np.ndarray):
        return grad, grad

    return record("add", (a, b), Tensor(a.data + b.data), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two tensors of equal shape."""
    _require(a.shape == b.shape, f"shape: mul of {a.shape} and {b.shape}")

    def backward(grad: np.ndarray):
        return grad * b.data, grad * a.data

    return record("mul", (a, b), Tensor(a.data * b.data), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply every element by a constant."""

    def backward(grad: np.ndarray):
        return (grad * factor,)

    return record("scale", (a,), Tensor(a.data * factor), backward)


def scalar_mul(a: Tensor, factor: Tensor) -> Tensor:
    """Multiply every element by a learnable one-element tensor."""
    _require(factor.size == 1, f"scalar_mul factor must have one element, got {factor.shape}")
    value = factor.data.reshape(-1)[0]

    def backward(grad: np.ndarray):
        return grad * value, np.full(factor.shape, (grad * a.data).sum(), dtype=factor.data.dtype)

    return record("scalar_mul", (a, factor), Tensor(a.data * value), backward)


def concat_channels(tensors: typing.Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 1. All other dimensions must match."""
    if not tensors:
        raise TwinLiteValidationError("concat_channels needs at least one tensor")
    first = tensors[0]
    for tensor in tensors[1:]:
        _require(
            tensor.ndim == first.ndim
            and tensor.shape[:1] == first.shape[:1]
            and tensor.shape[2:] == first.shape[2:],
            f"N, H, W: cannot concatenate {tensor.shape} with {first.shape}",
        )
    splits = np.cumsum([tensor.shape[1] for tensor in tensors])[:-1]
    out = np.concatenate([tensor.data for tensor in tensors], axis=1)

    def backward(grad: np.ndarray):
        return tuple(np.ascontiguousarray(part) for part in np.split(grad, splits, axis=1))

    return record("concat_channels", tuple(tensors), Tensor(out), backward)


def reshape(a: Tensor, shape: typing.Sequence[int]) -> Tensor:
    """Reinterpret the row-major data with another shape."""
    out = a.data.reshape(tuple(shape))

    def backward(grad: np.ndarray):
        return (grad.reshape(a.shape),)

    return record("reshape", (a,), Tensor(out), backward)


def permute(a: Tensor, axes: typing.Sequence[int]) -> Tensor:
    """Reorder the axes of a tensor."""
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def backward(grad: np.ndarray):
        return (np.ascontiguousarray(grad.transpose(inverse)),)

    return record("permute", (a,), Tensor(out), backward)


def sum_all(a: Tensor) -> Tensor:
    """Sum of every element, as a scalar tensor."""

    def backward(grad: np.ndarray):
        return (np.full(a.shape, grad.reshape(-1)[0], dtype=a.data.dtype),)

    return record("sum_all", (a,), Tensor(a.data.sum()), backward)
