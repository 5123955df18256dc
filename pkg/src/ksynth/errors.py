"""Exception hierarchy shared across the package."""


class KsynthError(Exception):
    """Base class for all package errors."""


class DimensionError(KsynthError):
    """Shapes of the operands are incompatible."""


class ConfigError(KsynthError):
    """A configuration value is invalid (even kernel size, bad divisibility, ...)."""


class UsageError(KsynthError):
    """An operation was called in a way its contract forbids."""


class DivergenceError(KsynthError):
    """Training produced a non-finite loss."""
