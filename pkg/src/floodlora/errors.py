"""Exception hierarchy shared across the package."""


class FloodLoraError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FloodLoraError, ValueError):
    """Invalid hyperparameter, shape configuration, or option value."""


class DimensionError(FloodLoraError, ValueError):
    """Operand shapes are incompatible."""


class StateError(FloodLoraError, RuntimeError):
    """Operation is not valid in the object's current state (e.g. double merge)."""


class ValidationError(FloodLoraError, ValueError):
    """Input data violates a value contract (e.g. non-binary targets)."""


class UsageError(FloodLoraError, ValueError):
    """API called incorrectly (e.g. backward on a non-scalar)."""


class DataFormatError(FloodLoraError, OSError):
    """A dataset or checkpoint file is missing, truncated, or corrupt."""


class NumericalError(FloodLoraError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message, *, epoch=None, batch=None, lr=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.lr = lr
