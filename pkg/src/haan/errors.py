"""Exception types shared across the package."""


class HaanError(Exception):
    """Base class for all package errors."""


class DimensionError(HaanError, ValueError):
    """Tensor or image shapes do not agree."""


class GeometryError(HaanError, ValueError):
    """An op would produce an empty or otherwise degenerate output."""


class ContractError(HaanError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(HaanError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class DegenerateInputError(HaanError, ValueError):
    """Input data cannot be processed (e.g. a channel with zero mean)."""


class ConfigError(HaanError, ValueError):
    """Invalid configuration or dataset."""


class FormatError(HaanError, ValueError):
    """A serialized file is corrupt, truncated or of an unknown version."""
