"""
Binary checkpoints.

Layout, all integers unsigned 32-bit little-endian::

    b"TWLT"  version  config_length  config_json(utf-8)  tensor_count
    tensor_count times:
        name_length  name(utf-8)  rank  dims[rank]  float32 little-endian values

The config JSON echoes the :class:`~twinlite.model.ModelConfig`. Optimizer
moments travel as extra tensors named ``optim.m.<param>`` and
``optim.v.<param>`` plus a one-element ``optim.step``. Float32 models
round-trip bit-exactly.
"""
import logging
import struct
import typing

import numpy as np

from twinlite.errors import CheckpointError, ConfigError, ShapeError
from twinlite.model import ModelConfig, TwinLiteNet
from twinlite.optim import OptimState
from twinlite.tensor import SINGLE, Tensor

logger = logging.getLogger(__name__)

MAGIC = b"TWLT"
VERSION = 1

OPTIM_M = "optim.m."
OPTIM_V = "optim.v."
OPTIM_STEP = "optim.step"

_U32 = struct.Struct("<I")


def _u32(value: int) -> bytes:
    return _U32.pack(value)


def encode(config: ModelConfig, tensors: typing.Mapping[str, np.ndarray]) -> bytes:
    """Serialize a config and named arrays into checkpoint bytes."""
    config_json = config.to_json().encode("utf-8")
    parts = [MAGIC, _u32(VERSION), _u32(len(config_json)), config_json, _u32(len(tensors))]
    for name, array in tensors.items():
        encoded_name = name.encode("utf-8")
        parts += [_u32(len(encoded_name)), encoded_name, _u32(array.ndim)]
        parts += [_u32(dim) for dim in array.shape]
        parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    """Sequential decoding with the current byte offset in every error."""

    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        remaining = len(self.payload) - self.offset
        if count > remaining:
            raise CheckpointError(
                f"truncated {what} at byte offset {self.offset}: need {count} bytes, "
                f"{remaining} left"
            )
        chunk = self.payload[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def decode(payload: bytes) -> typing.Tuple[ModelConfig, typing.Dict[str, np.ndarray]]:
    """
    Parse checkpoint bytes completely.

    Raises:
        CheckpointError: On a bad magic, an unknown version, a malformed config,
            truncated or trailing data, or a duplicate tensor name. The message
            carries the byte offset.
    """
    reader = _Reader(payload)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint: bad magic {magic!r} at byte offset 0")
    version = reader.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unknown checkpoint version {version} at byte offset 4")
    config_offset = reader.offset
    config_bytes = reader.take(reader.u32("config length"), "config")
    try:
        config = ModelConfig.from_json(config_bytes.decode("utf-8"))
    except (UnicodeDecodeError, ConfigError, TypeError) as exc:
        raise CheckpointError(f"bad model config at byte offset {config_offset}: {exc}") from exc
    tensors: typing.Dict[str, np.ndarray] = {}
    for _ in range(reader.u32("tensor count")):
        name_offset = reader.offset
        try:
            name = reader.take(reader.u32("name length"), "tensor name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"bad tensor name at byte offset {name_offset}") from exc
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r} at byte offset {name_offset}")
        rank = reader.u32(f"rank of {name}")
        shape = tuple(reader.u32(f"dims of {name}") for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        data = reader.take(4 * count, f"data of {name}")
        tensors[name] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(shape)
    if reader.offset != len(payload):
        raise CheckpointError(
            f"{len(payload) - reader.offset} trailing bytes at byte offset {reader.offset}"
        )
    return config, tensors


def save_checkpoint(
    model: TwinLiteNet, path: str, *, state: typing.Optional[OptimState] = None
):
    """Write the model weights, its config and optionally the optimizer state to `path`."""
    tensors = {name: tensor.data for name, tensor in model.weights.items()}
    if state is not None:
        for name in state.m:
            tensors[OPTIM_M + name] = state.m[name]
            tensors[OPTIM_V + name] = state.v[name]
        tensors[OPTIM_STEP] = np.array([state.step], dtype=np.float32)
    with open(path, "wb") as handle:
        handle.write(encode(model.config, tensors))
    logger.info("saved checkpoint %s (%d tensors)", path, len(tensors))


def load_checkpoint(
    path: str, *, expected_config: typing.Optional[ModelConfig] = None
) -> typing.Tuple[TwinLiteNet, typing.Optional[OptimState]]:
    """
    Read a checkpoint written by :func:`save_checkpoint`.

    The file is parsed completely before a model is built, so a bad file never
    yields a partially loaded model.

    Args:
        path: The checkpoint file.
        expected_config: When given, the stored config must equal it.

    Returns:
        The model in inference mode and the optimizer state, if one was stored.

    Raises:
        CheckpointError: If the file is malformed, its weights do not fit its
            config, or the config is not `expected_config`.
    """
    try:
        with open(path, "rb") as handle:
            payload = handle.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    config, tensors = decode(payload)
    if expected_config is not None and config != expected_config:
        raise CheckpointError(
            f"checkpoint config does not match: stored {config}, expected {expected_config}"
        )
    try:
        weights = {
            name: Tensor(array, dtype=SINGLE, name=name)
            for name, array in tensors.items()
            if not name.startswith("optim.")
        }
        model = TwinLiteNet(config, weights)
    except (ConfigError, ShapeError) as exc:
        raise CheckpointError(f"checkpoint {path} does not fit its config: {exc}") from exc
    state = None
    if OPTIM_STEP in tensors:
        names = [name[len(OPTIM_M) :] for name in tensors if name.startswith(OPTIM_M)]
        missing = [name for name in names if OPTIM_V + name not in tensors]
        if missing:
            raise CheckpointError(f"optimizer state lacks the second moment of {missing[0]!r}")
        if tensors[OPTIM_STEP].size != 1:
            raise CheckpointError(
                f"{OPTIM_STEP} must hold one value, got shape {tensors[OPTIM_STEP].shape}"
            )
        parameters = model.parameters()
        for name in names:
            if name not in parameters:
                raise CheckpointError(f"optimizer state for unknown parameter {name!r}")
            for moment in (tensors[OPTIM_M + name], tensors[OPTIM_V + name]):
                if moment.shape != parameters[name].shape:
                    raise CheckpointError(
                        f"optimizer state of {name!r} has shape {moment.shape}, "
                        f"expected {parameters[name].shape}"
                    )
        state = OptimState(
            m={name: tensors[OPTIM_M + name].copy() for name in names},
            v={name: tensors[OPTIM_V + name].copy() for name in names},
            step=int(tensors[OPTIM_STEP].reshape(-1)[0]),
        )
    logger.info("loaded checkpoint %s (%d parameters)", path, model.param_count())
    return model, state
