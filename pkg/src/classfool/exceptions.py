"""Exception hierarchy shared across the package."""


class ClassfoolError(Exception):
    """Base class for all errors raised by classfool."""


class ValidationError(ClassfoolError, ValueError):
    """Invalid argument values or inconsistent configuration."""


class ShapeError(ValidationError):
    """Array dimensions do not match what an operation requires."""


class ConfigError(ValidationError):
    """A configuration is structurally valid but unusable (empty pool, bad key, ...)."""


class FormatError(ClassfoolError, ValueError):
    """A file does not conform to its documented on-disk layout."""


class VersionError(FormatError):
    """A file uses a container/artifact version this build cannot read."""


class NumericError(ClassfoolError, ArithmeticError):
    """A numeric computation produced non-finite or degenerate values."""


class DegenerateGradientError(NumericError):
    """Gradient norms collapsed below the usable threshold (saturated batch)."""


class TrainingError(ClassfoolError, RuntimeError):
    """Victim training finished below the required accuracy threshold."""

    def __init__(self, message: str, accuracy: float | None = None):
        super().__init__(message)
        self.accuracy = accuracy
