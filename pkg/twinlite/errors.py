"""All exceptions for the twinlite package."""


class TwinLiteError(Exception):
    """The base class for all twinlite errors."""


class TwinLiteValidationError(TwinLiteError):
    """Raise when twinlite receives bad input from the user."""


class ShapeError(TwinLiteValidationError):
    """Raise when tensor shapes are incompatible with an operation.

    The message always names the offending dimension, e.g. ``input channels``
    or ``output height``.
    """


class ConfigError(TwinLiteValidationError):
    """Raise when a configuration is invalid or does not match the weights."""


class DatasetError(TwinLiteValidationError):
    """Raise when a dataset directory or sample file is malformed.

    Messages name the sample id whenever one is known.
    """


class CheckpointError(TwinLiteError):
    """Raise when a checkpoint file cannot be read or does not fit the model.

    Messages carry the byte offset where decoding stopped.
    """


class GradientError(TwinLiteValidationError):
    """Raise when differentiation is requested on something that cannot be differentiated."""


class TrainingDivergedError(TwinLiteError):
    """Raise when the training loss stops being a finite number."""


class ModeError(TwinLiteValidationError):
    """Raise when a model is in the wrong mode (training vs. inference) for an operation."""


class AlreadyFusedError(TwinLiteValidationError):
    """Raise when re-parameterization is requested on an already fused model."""
