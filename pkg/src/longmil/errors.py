"""Exception types shared across the package.

Everything user-facing derives from LongMILError so the CLI can map
validation problems to exit code 1 and genuine runtime failures to 2.
"""


class LongMILError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LongMILError):
    """Operand dimensions are incompatible or empty."""


class ConfigError(LongMILError):
    """A configuration value is out of its valid range."""


class DegenerateRowError(LongMILError):
    """A softmax row contains no finite entry."""


class StateError(LongMILError):
    """A saved trace was reused or does not match the forward pass."""


class FormatError(LongMILError):
    """A serialized file is malformed.  Carries the byte offset at which
    the problem was detected when one is meaningful."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class InputError(LongMILError):
    """A numeric input violates a value-level precondition."""


class DiagnosticError(LongMILError):
    """A diagnostic assertion failed; the message carries the values."""


class GenerationError(LongMILError):
    """Synthetic bag placement failed after bounded retries."""


class StratificationError(LongMILError):
    """A split would leave some class without any bag."""


class MetricUndefinedError(LongMILError):
    """A metric is undefined for the given label distribution."""


class TrainingError(LongMILError):
    """Training aborted (non-finite loss or gradient)."""
