"""Exception types shared across the package."""


class CdsError(Exception):
    """Base class for all package errors."""


class ShapeError(CdsError):
    """Incompatible or invalid tensor shapes."""


class PrecisionError(CdsError):
    """Mixed or unsupported floating precisions."""


class ParameterError(CdsError):
    """Invalid layer/operation parameterization."""


class TapeStateError(CdsError):
    """Backward requested in an invalid tape state."""


class EvaluationError(CdsError):
    """A checked function produced a non-finite value."""


class FormatError(CdsError):
    """Malformed external file (dataset, tensor container, image)."""


class CheckpointCorruptError(FormatError):
    """Checkpoint failed its whole-file checksum or is truncated."""


class CheckpointMismatchError(CdsError):
    """Checkpoint does not match the target model architecture."""


class ConfigError(CdsError):
    """Invalid run configuration."""
