"""Exception taxonomy shared across the package."""


class MsvqError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(MsvqError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ParameterError(MsvqError, ValueError):
    """A scalar argument is outside its valid range."""


class UsageError(MsvqError, TypeError):
    """An API was called in a way its contract forbids."""


class CapacityError(MsvqError, ValueError):
    """A buffer was asked to hold more items than it can."""


class ConfigError(MsvqError, ValueError):
    """A configuration failed validation; message names the offending field."""


class NonFiniteLossError(MsvqError, ArithmeticError):
    """Training produced a NaN/Inf loss; message carries a diagnostic dump."""


class CheckpointError(MsvqError):
    """Base class for checkpoint serialization failures."""


class CheckpointVersionError(CheckpointError):
    """Bad magic or unsupported format version in a checkpoint header."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint file ended before the manifest said it should."""


class CheckpointShapeError(CheckpointError):
    """A stored tensor does not match the shape the manifest declares."""


class DataFormatError(MsvqError, ValueError):
    """A dataset file violates its documented binary layout."""


class RecordLengthError(DataFormatError):
    """File size is not a whole number of fixed-width records."""


class LabelRangeError(DataFormatError):
    """A stored class label is outside the legal range."""
