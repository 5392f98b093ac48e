"""
Folding batch norms into the convolutions that feed them.

In inference mode a batch norm is an affine map per channel, so a convolution
followed by one is again a single convolution:

``w' = w * s`` and ``b' = (b - mean) * s + beta`` with ``s = gamma / sqrt(var + eps)``.

:func:`fuse_model` applies this to every fusible layer of a trained
:class:`~twinlite.model.TwinLiteNet` and returns a new model that produces the
same outputs with fewer parameters.
"""
import logging
import typing

import numpy as np

from twinlite.errors import AlreadyFusedError, ModeError, ShapeError
from twinlite.model import TwinLiteNet, fusible_layers
from twinlite.ops import BN_EPS
from twinlite.tensor import Tensor

logger = logging.getLogger(__name__)

CONV = "conv"
TRANSPOSE = "transpose"


class FusedConv(typing.NamedTuple):
    """A convolution with the batch norm folded in."""

    weight: Tensor
    bias: Tensor


def fuse_conv_bn(
    weight: Tensor,
    bias: typing.Optional[Tensor],
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    *,
    eps: float = BN_EPS,
    kind: str = CONV,
) -> FusedConv:
    """
    Fold one batch norm into the convolution before it.

    Args:
        weight: ``O, I, Kh, Kw`` for a convolution, ``I, O, Kh, Kw`` for a
            transposed convolution.
        bias: The convolution bias, or None for a bias-free convolution.
        gamma: Batch norm scale.
        beta: Batch norm shift.
        running_mean: Batch norm running mean.
        running_var: Batch norm running variance.
        eps: The batch norm epsilon.
        kind: ``"conv"`` or ``"transpose"``.

    Returns:
        The fused weight and bias, in the precision of `weight`.

    Raises:
        ShapeError: If the batch norm width does not match the output channels.
    """
    axis = 0 if kind == CONV else 1
    out_channels = weight.shape[axis]
    for label, tensor in (
        ("gamma", gamma),
        ("beta", beta),
        ("running mean", running_mean),
        ("running variance", running_var),
    ):
        if tensor.shape != (out_channels,):
            raise ShapeError(
                f"output channels: convolution has {out_channels}, batch norm "
                f"{label} has shape {tensor.shape}"
            )
    scale = gamma.data.astype(np.float64) / np.sqrt(running_var.data.astype(np.float64) + eps)
    view = [1] * weight.ndim
    view[axis] = out_channels
    fused_weight = weight.data.astype(np.float64) * scale.reshape(view)
    base = np.zeros(out_channels) if bias is None else bias.data.astype(np.float64)
    fused_bias = (base - running_mean.data) * scale + beta.data
    return FusedConv(
        weight=Tensor(fused_weight, dtype=weight.dtype),
        bias=Tensor(fused_bias, dtype=weight.dtype),
    )


def fuse_model(model: TwinLiteNet) -> TwinLiteNet:
    """
    Return an inference-only copy of `model` with every batch norm that follows
    a convolution folded into it.

    The input model is left untouched. Fusing an already fused model returns an
    unchanged copy.

    Raises:
        ModeError: If `model` is in training mode.
    """
    if model.training:
        raise ModeError(
            "fusion needs inference-mode batch norms; call model.eval() first"
        )
    if model.config.fused:
        logger.info("model is already fused; returning a copy")
        return model.copy()
    weights = {
        name: Tensor(tensor.data.copy(), dtype=tensor.dtype, name=name)
        for name, tensor in model.weights.items()
    }
    for prefix, kind in fusible_layers(model.config):
        conv, bn = f"{prefix}.conv", f"{prefix}.bn"
        fused = fuse_conv_bn(
            weights[f"{conv}.weight"],
            weights.get(f"{conv}.bias"),
            weights.pop(f"{bn}.gamma"),
            weights.pop(f"{bn}.beta"),
            weights.pop(f"{bn}.running_mean"),
            weights.pop(f"{bn}.running_var"),
            kind=kind,
        )
        weights[f"{conv}.weight"] = fused.weight
        weights[f"{conv}.bias"] = fused.bias
        logger.debug("fused %s (%s)", prefix, kind)
    fused_model = TwinLiteNet(model.config._replace(fused=True), weights)
    logger.info(
        "fused %d layers: %d -> %d parameters",
        len(fusible_layers(model.config)),
        model.param_count(),
        fused_model.param_count(),
    )
    return fused_model


def ensure_unfused(model: TwinLiteNet):
    """
    Raises:
        AlreadyFusedError: If `model` has already been re-parameterized.
    """
    if model.config.fused:
        raise AlreadyFusedError("model is already fused")
