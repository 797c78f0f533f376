"""Exception hierarchy shared by every forec module."""


class ForecError(Exception):
    """Base class for all errors raised by forec."""


class DimensionError(ForecError, ValueError):
    """Tensor shapes do not line up for an operation."""

    def __init__(self, message: str, *, expected=None, got=None):
        super().__init__(message)
        self.expected = expected
        self.got = got


class LabelError(ForecError, ValueError):
    """A label map holds a value outside [0, C) that is not the ignore sentinel."""

    def __init__(self, message: str, *, value=None, num_classes=None):
        super().__init__(message)
        self.value = value
        self.num_classes = num_classes


class MaskError(ForecError, ValueError):
    """A mask that must be binary contains other values."""


class ProbabilityError(ForecError, ValueError):
    """A probability map is negative or does not sum to one per pixel."""


class NumericalError(ForecError, ArithmeticError):
    """NaN or Inf encountered in a loss, gradient or parameter."""

    def __init__(self, message: str, *, name=None, step=None):
        super().__init__(message)
        self.name = name
        self.step = step


class CheckpointError(ForecError):
    """A checkpoint file is malformed or does not match the expected network."""


class MagicError(CheckpointError):
    """The checkpoint header magic or version is not recognised."""


class ImageFormatError(ForecError, ValueError):
    """A PPM/PGM file is malformed or uses an unsupported variant."""


class ConfigError(ForecError, ValueError):
    """A training configuration is invalid."""

    def __init__(self, message: str, *, key=None):
        super().__init__(message)
        self.key = key


class DataError(ForecError):
    """Dataset layout, partition or sampling problem."""


class NetworkError(ForecError):
    """A network is used in a way its role does not allow."""
