"""Exception hierarchy shared by every module of the package."""


class DenseSwinError(Exception):
    """Base class for all package errors."""


class DimensionError(DenseSwinError, ValueError):
    """Shapes or extents are incompatible with an operation."""


class DTypeError(DenseSwinError, TypeError):
    """Two tensors of different element types met in one operation."""


class ContractError(DenseSwinError, ValueError):
    """A documented precondition of an operation was violated."""


class NumericError(DenseSwinError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ConfigError(DenseSwinError, ValueError):
    """A configuration value is missing, unknown or inconsistent."""


class IngestionError(DenseSwinError, OSError):
    """An image or manifest file could not be read."""


class CheckpointError(DenseSwinError, OSError):
    """A checkpoint container is corrupt, truncated or of the wrong version."""
