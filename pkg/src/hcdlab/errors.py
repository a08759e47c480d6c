"""Exception hierarchy shared by every hcdlab module."""


class HcdError(Exception):
    """Base class for all hcdlab errors."""


class ShapeError(HcdError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(HcdError, RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, double backward)."""


class ConfigError(HcdError, ValueError):
    """A configuration value violates its documented invariant."""


class FormatError(HcdError, ValueError):
    """A binary file has a bad magic, version or declared size."""


class ChecksumError(FormatError):
    """Payload bytes do not match the stored FNV-1a checksum."""


class NonFiniteLossError(HcdError, FloatingPointError):
    """Training produced a NaN or Inf loss term."""
