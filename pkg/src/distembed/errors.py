"""Exception hierarchy shared across the package."""


class DistEmbedError(Exception):
    """Base class for all package errors."""


class ShapeError(DistEmbedError, ValueError):
    """Incompatible tensor shapes or dimensions."""


class DomainError(DistEmbedError, ValueError):
    """Input outside the mathematical domain of an operation (log/sqrt of non-positive)."""


class GeometryError(DistEmbedError, ValueError):
    """Invalid pooling/convolution geometry."""


class ContractError(DistEmbedError, RuntimeError):
    """Caller violated an API precondition."""


class ConfigError(DistEmbedError, ValueError):
    """Invalid configuration value."""


class DataError(DistEmbedError):
    """Dataset or file content problem."""


class DecodeError(DataError):
    pass


class ChecksumError(DataError):
    pass


class VersionError(DataError):
    pass


class CapabilityError(DistEmbedError, RuntimeError):
    """An optional capability was requested but is not available."""


class NumericError(DistEmbedError, ArithmeticError):
    """Non-finite values or tolerance breach."""
