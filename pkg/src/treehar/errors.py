"""Exception types shared across the package."""


class TreeharError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(TreeharError, ValueError):
    """A tensor dimension does not match what an operation requires."""


class SchemaError(TreeharError, ValueError):
    """A task graph violates its structural invariants."""


class DataFormatError(TreeharError, ValueError):
    """A dataset, config, or schema file cannot be parsed."""


class ModelFormatError(DataFormatError):
    """A model file is corrupt, truncated, or of an unsupported version."""


class NumericError(TreeharError, ArithmeticError):
    """A non-finite value appeared where finite arithmetic was required."""
