"""Exception types raised across the package."""


class CagaError(Exception):
    """Base class for all package errors."""


class ShapeError(CagaError, ValueError):
    """Operand extents are incompatible."""


class ContractError(CagaError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(CagaError, ArithmeticError):
    """NaN or infinite values where finite ones are required."""


class ConfigError(CagaError, ValueError):
    """Invalid model, block or training configuration."""


class DatasetError(CagaError, ValueError):
    """Malformed dataset layout or contents."""


class ParseError(DatasetError):
    """A file could not be decoded."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class StratificationError(DatasetError):
    """A class has too few samples to be spread over every fold."""
