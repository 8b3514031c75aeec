"""Exception hierarchy shared across the package."""


class PondError(Exception):
    """Base class for all package errors."""


class ShapeError(PondError, ValueError):
    """Incompatible tensor or series shapes."""


class NumericFault(PondError, ArithmeticError):
    """A primitive produced non-finite values from finite inputs."""


class GraphStateError(PondError, RuntimeError):
    """Graph used out of order, e.g. backward before forward."""


class ConfigError(PondError, ValueError):
    """Invalid configuration or precondition on user-supplied values."""


class FormatError(PondError, IOError):
    """Base class for on-disk container errors."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class CompatibilityError(PondError):
    """A file is well formed but does not fit what it is being combined with."""
