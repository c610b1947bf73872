"""Exception hierarchy shared across the package."""


class BfshieldError(Exception):
    """Base class for all domain errors raised by this package."""


class ShapeError(BfshieldError):
    """Tensor shapes are inconsistent for the requested operation."""


class UnboundInputError(BfshieldError):
    """A graph input placeholder was left unbound at evaluation time."""


class NonFiniteError(BfshieldError):
    """A NaN or Inf appeared where only finite values are allowed."""


class DataFormatError(BfshieldError):
    """A dataset or image file is malformed or truncated."""


class ConfigError(BfshieldError):
    """Invalid parameter or configuration value."""
