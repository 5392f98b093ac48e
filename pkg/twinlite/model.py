"""
The TwinLiteNet architecture.

The network is an ESPNet-C style encoder that maps an ``N, 3, H, W`` image to a
``N, 32, H/8, W/8`` feature map A, an optional dual-attention block (position
and channel attention, each followed by a 3x3 conv + BN + PReLU, summed into
feature map B) and one transposed-convolution decoder per head.

Weights live in a flat dictionary of named tensors, the same table a
checkpoint stores. Every forward function takes that dictionary, so any number
of forwards can share one weight set.

.. highlight:: python
.. code-block:: python

    from twinlite.model import ModelConfig, TwinLiteNet
    from twinlite.tensor import Tensor

    model = TwinLiteNet(ModelConfig(), seed=0)
    da_logits, lane_logits = model(Tensor(images))
"""
import functools
import json
import logging
import typing

import numpy as np

from twinlite import ops
from twinlite.errors import ConfigError, ShapeError
from twinlite.tensor import SINGLE, ConvParams, Shape, Tensor, numpy_dtype

logger = logging.getLogger(__name__)

TWO_HEADS = "two-heads"
SINGLE_HEAD = "single-head-3class"
HEAD_MODES = (TWO_HEADS, SINGLE_HEAD)

# Roles of the feature maps flowing between the blocks.
ROLE_ENCODER = "A"
ROLE_FUSED = "B"

# Attention query/key channel reduction.
ATTENTION_REDUCTION = 8

# Initial PReLU slope.
PRELU_INIT = 0.25

Weights = typing.Dict[str, Tensor]

_BUFFER_SUFFIXES = (".running_mean", ".running_var")


class EspConfig(typing.NamedTuple):
    """One efficient-spatial-pyramid block."""

    in_channels: int
    out_channels: int
    stride: int = 1
    branches: int = 5
    dilations: typing.Tuple[int, ...] = (1, 2, 4, 8, 16)

    @property
    def branch_channels(self) -> int:
        """Channels produced by the reduction and by every dilated branch."""
        return self.out_channels // self.branches

    @property
    def residual(self) -> bool:
        """Whether the block adds its input to its output."""
        return self.stride == 1 and self.in_channels == self.out_channels

    def validate(self) -> "EspConfig":
        """Check the block layout and return self."""
        if self.stride not in (1, 2):
            raise ConfigError(f"ESP stride must be 1 or 2, got {self.stride}")
        if self.branches < 1 or self.out_channels % self.branches:
            raise ConfigError(
                f"ESP out channels ({self.out_channels}) must be divisible by "
                f"the branch count ({self.branches})"
            )
        if len(self.dilations) != self.branches:
            raise ConfigError(
                f"ESP needs one dilation per branch: {self.branches} branches, "
                f"dilations {self.dilations}"
            )
        return self


class ModelConfig(typing.NamedTuple):
    """Full architectural description, including the ablation switches."""

    in_channels: int = 3
    level2_repeats: int = 2
    level3_repeats: int = 3
    level2_channels: int = 70
    level3_channels: int = 200
    encoder_channels: int = 32
    use_attention: bool = True
    head_mode: str = TWO_HEADS
    classes_per_head: int = 2
    decoder_channels: typing.Tuple[int, ...] = (16, 8)
    branches: int = 5
    dilations: typing.Tuple[int, ...] = (1, 2, 4, 8, 16)
    fused: bool = False
    input_width: int = 640
    input_height: int = 360

    @property
    def head_names(self) -> typing.Tuple[str, ...]:
        """Weight prefixes of the decoder heads, in output order."""
        if self.head_mode == TWO_HEADS:
            return ("head_da", "head_lane")
        return ("head_seg",)

    @property
    def head_classes(self) -> int:
        """Logit channels per head."""
        return self.classes_per_head if self.head_mode == TWO_HEADS else 3

    def validate(self) -> "ModelConfig":
        """
        Check every field and return self.

        Raises:
            ConfigError: On the first invalid field.
        """
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")
        if self.level2_repeats < 1 or self.level3_repeats < 1:
            raise ConfigError(
                "level2_repeats and level3_repeats must be >= 1, got "
                f"{self.level2_repeats} and {self.level3_repeats}"
            )
        for label, channels in (
            ("level2_channels", self.level2_channels),
            ("level3_channels", self.level3_channels),
        ):
            if channels % self.branches:
                raise ConfigError(
                    f"{label} ({channels}) must be divisible by branches ({self.branches})"
                )
        if self.encoder_channels % ATTENTION_REDUCTION:
            raise ConfigError(
                f"encoder_channels ({self.encoder_channels}) must be divisible by "
                f"{ATTENTION_REDUCTION}"
            )
        if self.classes_per_head < 2:
            raise ConfigError(f"classes_per_head must be >= 2, got {self.classes_per_head}")
        if len(self.decoder_channels) != 2:
            raise ConfigError(
                f"decoder_channels needs two widths, got {self.decoder_channels}"
            )
        if len(self.dilations) != self.branches:
            raise ConfigError(f"one dilation per branch: {self.dilations}")
        if self.input_width % 8 or self.input_height % 8:
            raise ConfigError(
                f"input size {self.input_width}x{self.input_height} must be "
                "divisible by 8"
            )
        return self

    def to_json(self) -> str:
        """Serialize to a JSON object."""
        return json.dumps(self._asdict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        """
        Parse a JSON object written by :meth:`to_json`.

        Raises:
            ConfigError: On unknown keys or malformed JSON.
        """
        try:
            fields = json.loads(text)
        except ValueError as exc:
            raise ConfigError(f"model config is not valid JSON: {exc}") from exc
        unknown = sorted(set(fields) - set(cls._fields))
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        for key in ("decoder_channels", "dilations"):
            if key in fields:
                fields[key] = tuple(fields[key])
        return cls(**fields).validate()


class FeatureMap(typing.NamedTuple):
    """A tensor together with its role in the network."""

    tensor: Tensor
    role: str


def is_buffer(name: str) -> bool:
    """Whether a named tensor is a running statistic rather than a learnable parameter."""
    return name.endswith(_BUFFER_SUFFIXES)


def fusible_layers(config: ModelConfig) -> typing.List[typing.Tuple[str, str]]:
    """
    Every convolution directly followed by a batch norm.

    Returns:
        ``(prefix, kind)`` pairs where kind is ``"conv"`` or ``"transpose"``.
        The convolution lives at ``prefix + ".conv"`` and its batch norm at
        ``prefix + ".bn"``.
    """
    layers = [("encoder.level1", "conv"), ("encoder.project", "conv")]
    if config.use_attention:
        layers += [("attention.fuse_pam", "conv"), ("attention.fuse_cam", "conv")]
    for head in config.head_names:
        layers += [(f"{head}.up1", "transpose"), (f"{head}.up2", "transpose")]
    return layers


def level2_in_channels(config: ModelConfig) -> int:
    """Channels entering the stage-2 downsampler: level-1 output plus the pooled image."""
    return 16 + config.in_channels


def level3_in_channels(config: ModelConfig) -> int:
    """Channels entering the stage-3 downsampler."""
    return 2 * config.level2_channels + config.in_channels


def encoder_blocks(config: ModelConfig) -> typing.List[typing.Tuple[str, EspConfig]]:
    """The ESP blocks of the encoder, in execution order."""
    esp = functools.partial(EspConfig, branches=config.branches, dilations=config.dilations)
    blocks = [
        ("encoder.level2_0", esp(level2_in_channels(config), config.level2_channels, 2))
    ]
    blocks += [
        (f"encoder.level2.{i}", esp(config.level2_channels, config.level2_channels))
        for i in range(config.level2_repeats)
    ]
    blocks.append(
        ("encoder.level3_0", esp(level3_in_channels(config), config.level3_channels, 2))
    )
    blocks += [
        (f"encoder.level3.{i}", esp(config.level3_channels, config.level3_channels))
        for i in range(config.level3_repeats)
    ]
    return blocks


class _Initializer:
    """Creates named tensors in a fixed order from one seeded generator."""

    def __init__(self, seed: int, dtype: str):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.weights: Weights = {}

    def _add(self, name: str, array: np.ndarray):
        self.weights[name] = Tensor(array, dtype=self.dtype, name=name)

    def _fill(self, shape: Shape, value: float) -> np.ndarray:
        return np.full(shape, value, dtype=numpy_dtype(self.dtype))

    def kaiming(self, name: str, shape: Shape, fan_in: int):
        std = np.sqrt(2.0 / fan_in)
        self._add(name, self.rng.standard_normal(shape) * std)

    def conv(self, name: str, out_c: int, in_c: int, kernel: int, bias: bool = False):
        self.kaiming(f"{name}.weight", (out_c, in_c, kernel, kernel), in_c * kernel * kernel)
        if bias:
            self._add(f"{name}.bias", self._fill((out_c,), 0.0))

    def transpose(self, name: str, in_c: int, out_c: int, kernel: int):
        self.kaiming(f"{name}.weight", (in_c, out_c, kernel, kernel), in_c)
        self._add(f"{name}.bias", self._fill((out_c,), 0.0))

    def bn(self, name: str, channels: int):
        self._add(f"{name}.gamma", self._fill((channels,), 1.0))
        self._add(f"{name}.beta", self._fill((channels,), 0.0))
        self._add(f"{name}.running_mean", self._fill((channels,), 0.0))
        self._add(f"{name}.running_var", self._fill((channels,), 1.0))

    def prelu(self, name: str, channels: int):
        self._add(f"{name}.slope", self._fill((channels,), PRELU_INIT))

    def scalar(self, name: str):
        self._add(name, self._fill((1,), 0.0))

    def conv_bn_act(self, prefix: str, out_c: int, in_c: int, kernel: int, fused: bool):
        self.conv(f"{prefix}.conv", out_c, in_c, kernel, bias=fused)
        if not fused:
            self.bn(f"{prefix}.bn", out_c)
        self.prelu(f"{prefix}.act", out_c)

    def bn_act(self, prefix: str, channels: int):
        self.bn(f"{prefix}.bn", channels)
        self.prelu(f"{prefix}.act", channels)

    def esp(self, prefix: str, config: EspConfig):
        width = config.branch_channels
        kernel = 3 if config.stride == 2 else 1
        self.conv(f"{prefix}.reduce", width, config.in_channels, kernel)
        for branch in range(config.branches):
            self.conv(f"{prefix}.branch{branch}", width, width, 3)
        self.bn_act(prefix, config.out_channels)

    def decoder(self, prefix: str, config: ModelConfig):
        first, second = config.decoder_channels
        for stage, (in_c, out_c) in (
            ("up1", (config.encoder_channels, first)),
            ("up2", (first, second)),
        ):
            self.transpose(f"{prefix}.{stage}.conv", in_c, out_c, 2)
            if not config.fused:
                self.bn(f"{prefix}.{stage}.bn", out_c)
            self.prelu(f"{prefix}.{stage}.act", out_c)
        self.transpose(f"{prefix}.classifier.conv", second, config.head_classes, 2)


def init_weights(config: ModelConfig, seed: int = 0, dtype: str = SINGLE) -> Weights:
    """
    Create a freshly initialized weight set.

    Convolution and transposed-convolution kernels are drawn from a fan-in
    scaled normal distribution (Kaiming), biases are zero, batch norms start at
    gamma 1, beta 0, mean 0, variance 1, PReLU slopes at 0.25 and both attention
    scales at 0, so the attention block starts as the identity.

    Args:
        config: The architecture.
        seed: Seed of the generator; equal seeds give bit-identical weights.
        dtype: ``"single"`` or ``"double"``.
    """
    config.validate()
    init = _Initializer(seed, dtype)
    channels = config.encoder_channels
    init.conv_bn_act("encoder.level1", 16, config.in_channels, 3, config.fused)
    init.bn_act("encoder.b1", level2_in_channels(config))
    blocks = encoder_blocks(config)
    for prefix, esp_config in blocks[: config.level2_repeats + 1]:
        init.esp(prefix, esp_config)
    init.bn_act("encoder.b2", level3_in_channels(config))
    for prefix, esp_config in blocks[config.level2_repeats + 1 :]:
        init.esp(prefix, esp_config)
    init.bn_act("encoder.b3", 2 * config.level3_channels)
    init.conv_bn_act(
        "encoder.project", channels, 2 * config.level3_channels, 1, config.fused
    )
    if config.use_attention:
        reduced = channels // ATTENTION_REDUCTION
        init.conv("attention.pam.query", reduced, channels, 1, bias=True)
        init.conv("attention.pam.key", reduced, channels, 1, bias=True)
        init.conv("attention.pam.value", channels, channels, 1, bias=True)
        init.scalar("attention.pam.gamma")
        init.scalar("attention.cam.gamma")
        init.conv_bn_act("attention.fuse_pam", channels, channels, 3, config.fused)
        init.conv_bn_act("attention.fuse_cam", channels, channels, 3, config.fused)
    for head in config.head_names:
        init.decoder(head, config)
    return init.weights


@functools.lru_cache(maxsize=32)
def parameter_shapes(config: ModelConfig) -> typing.Dict[str, Shape]:
    """The name and shape of every tensor a weight set for `config` must hold."""
    return {name: tensor.shape for name, tensor in init_weights(config).items()}


def check_weights(config: ModelConfig, weights: Weights):
    """
    Verify that `weights` is a complete weight set for `config`.

    Raises:
        ConfigError: Naming the first missing, unexpected or misshapen tensor.
    """
    expected = parameter_shapes(config)
    for name, shape in expected.items():
        if name not in weights:
            raise ConfigError(f"weights do not match the config: missing tensor {name!r}")
        if weights[name].shape != shape:
            raise ConfigError(
                f"weights do not match the config: tensor {name!r} has shape "
                f"{weights[name].shape}, expected {shape}"
            )
    for name in weights:
        if name not in expected:
            raise ConfigError(
                f"weights do not match the config: unexpected tensor {name!r}"
            )


def _get(weights: Weights, name: str) -> Tensor:
    try:
        return weights[name]
    except KeyError:
        raise ConfigError(f"missing tensor {name!r}") from None


def _norm(x: Tensor, weights: Weights, prefix: str, training: bool) -> Tensor:
    return ops.batch_norm(
        x,
        _get(weights, f"{prefix}.gamma"),
        _get(weights, f"{prefix}.beta"),
        _get(weights, f"{prefix}.running_mean"),
        _get(weights, f"{prefix}.running_var"),
        training=training,
    )


def bn_act(x: Tensor, weights: Weights, prefix: str, *, training: bool = False) -> Tensor:
    """Batch norm followed by PReLU."""
    x = _norm(x, weights, f"{prefix}.bn", training)
    return ops.prelu(x, _get(weights, f"{prefix}.act.slope"))


def conv_bn_act(
    x: Tensor,
    weights: Weights,
    prefix: str,
    params: ConvParams = ConvParams(),
    *,
    training: bool = False,
    fused: bool = False,
) -> Tensor:
    """Convolution, batch norm and PReLU; a fused layer skips the batch norm."""
    x = ops.conv2d(
        x, _get(weights, f"{prefix}.conv.weight"), weights.get(f"{prefix}.conv.bias"), params
    )
    if not fused:
        x = _norm(x, weights, f"{prefix}.bn", training)
    return ops.prelu(x, _get(weights, f"{prefix}.act.slope"))


def hierarchical_fusion(branches: typing.Sequence[Tensor]) -> typing.List[Tensor]:
    """Replace branch outputs by their running sums, in dilation order."""
    fused = [branches[0]]
    for branch in branches[1:]:
        fused.append(ops.add(fused[-1], branch))
    return fused


def esp_forward(
    x: Tensor,
    config: EspConfig,
    weights: Weights,
    prefix: str,
    *,
    training: bool = False,
) -> Tensor:
    """
    Run one efficient-spatial-pyramid block.

    The input is reduced to ``out/branches`` channels (1x1 conv, or a 3x3
    stride-2 conv when downsampling), passed through parallel 3x3 convolutions
    at the dilation ladder, merged by hierarchical feature fusion, concatenated,
    added to the input when the block is residual, and finished with batch norm
    and PReLU.

    Raises:
        ShapeError: If the input channel count does not match `config`.
    """
    config.validate()
    if x.ndim != 4 or x.shape[1] != config.in_channels:
        raise ShapeError(
            f"channels: {prefix} expects {config.in_channels} input channels, "
            f"got shape {x.shape}"
        )
    if config.stride == 2:
        reduce_params = ConvParams(stride=2, padding=1)
    else:
        reduce_params = ConvParams()
    reduced = ops.conv2d(x, _get(weights, f"{prefix}.reduce.weight"), None, reduce_params)
    branches = [
        ops.conv2d(
            reduced,
            _get(weights, f"{prefix}.branch{index}.weight"),
            None,
            ConvParams(padding=dilation, dilation=dilation),
        )
        for index, dilation in enumerate(config.dilations)
    ]
    out = ops.concat_channels(hierarchical_fusion(branches))
    if config.residual:
        out = ops.add(out, x)
    return bn_act(out, weights, prefix, training=training)


def encoder_forward(
    image: Tensor,
    config: ModelConfig,
    weights: Weights,
    *,
    training: bool = False,
) -> FeatureMap:
    """
    Encode an image into feature map A of shape ``N, 32, H/8, W/8``.

    The input, average-pooled to 1/2 and 1/4 scale, is concatenated into the
    batch norms that feed stages 2 and 3.

    Raises:
        ShapeError: If the image is not ``N, 3, H, W`` with H and W divisible by 8.
    """
    if image.ndim != 4 or image.shape[1] != config.in_channels:
        raise ShapeError(
            f"channels: the encoder expects N x {config.in_channels} x H x W, "
            f"got {image.shape}"
        )
    height, width = image.shape[2:]
    if height % 8 or width % 8:
        raise ShapeError(
            f"height/width: {height}x{width} is not divisible by 8; resize the "
            "image first (for example 1280x720 -> 640x360)"
        )
    fused = config.fused
    out0 = conv_bn_act(
        image,
        weights,
        "encoder.level1",
        ConvParams(stride=2, padding=1),
        training=training,
        fused=fused,
    )
    half = ops.avg_pool2d(image, 2)
    quarter = ops.avg_pool2d(image, 4)
    x = bn_act(ops.concat_channels([out0, half]), weights, "encoder.b1", training=training)

    blocks = encoder_blocks(config)
    level2, level3 = blocks[: config.level2_repeats + 1], blocks[config.level2_repeats + 1 :]
    down2 = esp_forward(x, level2[0][1], weights, level2[0][0], training=training)
    x = down2
    for prefix, esp_config in level2[1:]:
        x = esp_forward(x, esp_config, weights, prefix, training=training)
    x = bn_act(
        ops.concat_channels([x, down2, quarter]), weights, "encoder.b2", training=training
    )

    down3 = esp_forward(x, level3[0][1], weights, level3[0][0], training=training)
    x = down3
    for prefix, esp_config in level3[1:]:
        x = esp_forward(x, esp_config, weights, prefix, training=training)
    x = bn_act(ops.concat_channels([down3, x]), weights, "encoder.b3", training=training)

    features = conv_bn_act(x, weights, "encoder.project", training=training, fused=fused)
    return FeatureMap(features, ROLE_ENCODER)


def _check_feature_map(feature_map: Tensor, what: str):
    if feature_map.ndim != 4:
        raise ShapeError(f"{what} must be 4-D, got {feature_map.shape}")


def pam_forward(
    a: Tensor,
    weights: Weights,
    prefix: str = "attention.pam",
    *,
    return_attention: bool = False,
):
    """
    Position attention.

    Query and key are 1x1 projections to C/8 channels, the value a 1x1
    projection to C channels. Each position attends over every position; the
    aggregated values are scaled by a learnable scalar (initially 0) and added
    to the input.

    Returns:
        The output tensor, or ``(output, attention)`` when `return_attention`
        is set, where attention has shape ``N, hw, hw`` with rows summing to 1.
    """
    _check_feature_map(a, "position attention input")
    n, channels, height, width = a.shape
    positions = height * width
    reduced = channels // ATTENTION_REDUCTION

    def project(name: str, out_channels: int) -> Tensor:
        out = ops.conv2d(
            a, _get(weights, f"{prefix}.{name}.weight"), _get(weights, f"{prefix}.{name}.bias")
        )
        return ops.reshape(out, (n, out_channels, positions))

    query = ops.permute(project("query", reduced), (0, 2, 1))
    key = project("key", reduced)
    attention = ops.softmax(ops.bmm(query, key), axis=-1)
    value = project("value", channels)
    out = ops.bmm(value, ops.permute(attention, (0, 2, 1)))
    out = ops.reshape(out, a.shape)
    out = ops.add(ops.scalar_mul(out, _get(weights, f"{prefix}.gamma")), a)
    return (out, attention) if return_attention else out


def cam_forward(
    a: Tensor,
    weights: Weights,
    prefix: str = "attention.cam",
    *,
    return_attention: bool = False,
):
    """
    Channel attention.

    The channel energy ``A A^T`` (over flattened space) is replaced by
    ``rowmax - energy`` before the softmax; the aggregation is scaled by a
    learnable scalar (initially 0) and added to the input.

    Returns:
        The output tensor, or ``(output, attention)`` with attention of shape
        ``N, C, C``.
    """
    _check_feature_map(a, "channel attention input")
    n, channels, height, width = a.shape
    flat = ops.reshape(a, (n, channels, height * width))
    energy = ops.bmm(flat, ops.permute(flat, (0, 2, 1)))
    attention = ops.softmax(ops.rowmax_minus(energy), axis=-1)
    out = ops.reshape(ops.bmm(attention, flat), a.shape)
    out = ops.add(ops.scalar_mul(out, _get(weights, f"{prefix}.gamma")), a)
    return (out, attention) if return_attention else out


def attention_fuse(
    pam_out: Tensor,
    cam_out: Tensor,
    weights: Weights,
    prefix: str = "attention",
    *,
    training: bool = False,
    fused: bool = False,
) -> FeatureMap:
    """Pass both attention outputs through a 3x3 conv + BN + PReLU and sum them into B."""
    if pam_out.shape != cam_out.shape:
        raise ShapeError(
            f"shape: position attention gave {pam_out.shape}, channel attention "
            f"gave {cam_out.shape}"
        )
    params = ConvParams(padding=1)
    position = conv_bn_act(
        pam_out, weights, f"{prefix}.fuse_pam", params, training=training, fused=fused
    )
    channel = conv_bn_act(
        cam_out, weights, f"{prefix}.fuse_cam", params, training=training, fused=fused
    )
    return FeatureMap(ops.add(position, channel), ROLE_FUSED)


def decoder_forward(
    b: Tensor,
    weights: Weights,
    prefix: str,
    classes: int,
    *,
    training: bool = False,
    fused: bool = False,
) -> Tensor:
    """
    Decode feature map B into raw logits at full resolution.

    Two stages of (2x2 stride-2 transposed conv, BN, PReLU) followed by a final
    2x2 stride-2 transposed conv that emits ``classes`` unbounded logits.
    """
    _check_feature_map(b, "decoder input")
    x = b
    for stage in ("up1", "up2"):
        x = ops.conv_transpose2d(
            x,
            _get(weights, f"{prefix}.{stage}.conv.weight"),
            _get(weights, f"{prefix}.{stage}.conv.bias"),
            stride=2,
        )
        if not fused:
            x = _norm(x, weights, f"{prefix}.{stage}.bn", training)
        x = ops.prelu(x, _get(weights, f"{prefix}.{stage}.act.slope"))
    classifier = _get(weights, f"{prefix}.classifier.conv.weight")
    if classifier.shape[1] != classes:
        raise ConfigError(
            f"{prefix} emits {classifier.shape[1]} classes, {classes} were requested"
        )
    return ops.conv_transpose2d(
        x, classifier, _get(weights, f"{prefix}.classifier.conv.bias"), stride=2
    )


def model_features(
    image: Tensor,
    config: ModelConfig,
    weights: Weights,
    *,
    training: bool = False,
) -> typing.Tuple[FeatureMap, FeatureMap]:
    """Return feature maps A and B. Without attention, B is A."""
    encoded = encoder_forward(image, config, weights, training=training)
    if not config.use_attention:
        return encoded, FeatureMap(encoded.tensor, ROLE_FUSED)
    position = pam_forward(encoded.tensor, weights)
    channel = cam_forward(encoded.tensor, weights)
    return encoded, attention_fuse(
        position, channel, weights, training=training, fused=config.fused
    )


def model_forward(
    image: Tensor,
    config: ModelConfig,
    weights: Weights,
    *,
    training: bool = False,
) -> typing.Tuple[Tensor, ...]:
    """
    Run the whole network.

    Returns:
        One logit map per head, in :attr:`ModelConfig.head_names` order:
        ``(drivable, lane)`` with 2 channels each in two-heads mode, or a
        single 3-channel map (background, drivable, lane) in single-head mode.

    Raises:
        ConfigError: If `weights` does not match `config`, naming the first
            mismatched tensor.
    """
    config.validate()
    check_weights(config, weights)
    _, fused_features = model_features(image, config, weights, training=training)
    return tuple(
        decoder_forward(
            fused_features.tensor,
            weights,
            head,
            config.head_classes,
            training=training,
            fused=config.fused,
        )
        for head in config.head_names
    )


def learnable(weights: Weights) -> Weights:
    """The learnable subset of a weight set (running statistics excluded)."""
    return {name: tensor for name, tensor in weights.items() if not is_buffer(name)}


def param_count(config: ModelConfig, weights: Weights) -> int:
    """
    Count learnable scalars: kernels, biases, BN gamma/beta, PReLU slopes and
    attention scales. Running statistics are not counted.
    """
    check_weights(config, weights)
    return sum(tensor.size for tensor in learnable(weights).values())


class TwinLiteNet:
    """A configuration, its weights and a training/inference mode flag."""

    def __init__(
        self,
        config: ModelConfig = ModelConfig(),
        weights: typing.Optional[Weights] = None,
        *,
        seed: int = 0,
        dtype: str = SINGLE,
    ):
        """
        Create a model.

        Args:
            config: The architecture.
            weights: An existing weight set. When omitted, weights are
                initialized from `seed`.
            seed: Initialization seed.
            dtype: Precision of freshly initialized weights.

        Raises:
            ConfigError: If `weights` does not match `config`.
        """
        self.config = config.validate()
        self.weights = init_weights(config, seed, dtype) if weights is None else weights
        check_weights(config, self.weights)
        self.training = False

    def train(self, mode: bool = True) -> "TwinLiteNet":
        """Switch batch norms to batch statistics (and running-stat updates)."""
        self.training = mode
        return self

    def eval(self) -> "TwinLiteNet":
        """Switch batch norms to running statistics."""
        return self.train(False)

    def __call__(self, image: Tensor) -> typing.Tuple[Tensor, ...]:
        return model_forward(image, self.config, self.weights, training=self.training)

    def features(self, image: Tensor) -> typing.Tuple[FeatureMap, FeatureMap]:
        """Feature maps A and B for `image`."""
        return model_features(image, self.config, self.weights, training=self.training)

    def parameters(self) -> Weights:
        """The learnable tensors, by name."""
        return learnable(self.weights)

    def param_count(self) -> int:
        """See :func:`param_count`."""
        return param_count(self.config, self.weights)

    def copy(self, dtype: typing.Optional[str] = None) -> "TwinLiteNet":
        """A deep copy, optionally converted to another precision."""
        weights = {
            name: Tensor(tensor.data.copy(), dtype=dtype or tensor.dtype, name=name)
            for name, tensor in self.weights.items()
        }
        clone = TwinLiteNet(self.config, weights)
        clone.training = self.training
        return clone
