"""Exception types raised across the package."""


class GSPretrainError(Exception):
    """Base class; ``kind`` is the short tag the CLI prints."""

    kind = "Error"


class BehindCameraError(GSPretrainError, ValueError):
    kind = "BehindCamera"


class InvalidDepthError(GSPretrainError, ValueError):
    kind = "InvalidDepth"


class DegenerateRotationError(GSPretrainError, ValueError):
    kind = "DegenerateRotation"


class InvalidScaleError(GSPretrainError, ValueError):
    kind = "InvalidScale"


class ConfigurationError(GSPretrainError, ValueError):
    kind = "Configuration"


class NumericError(GSPretrainError, ArithmeticError):
    kind = "Numeric"


class NonFiniteLossError(NumericError):
    kind = "NonFiniteLoss"

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class NonFiniteGradientError(NumericError):
    kind = "NonFiniteGradient"

    def __init__(self, name):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


class EmptyBatchError(GSPretrainError):
    """No valid masked patch survived LiDAR validation."""

    kind = "EmptyBatch"


class CorruptCheckpointError(GSPretrainError):
    kind = "CorruptCheckpoint"


class CheckpointVersionError(CorruptCheckpointError):
    kind = "CheckpointVersion"


class ConfigMismatchError(GSPretrainError):
    kind = "ConfigMismatch"
