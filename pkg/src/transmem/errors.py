"""Exception hierarchy shared by every module."""


class TransMemError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(TransMemError, ValueError):
    """Two tensors that must agree in shape do not."""

    def __init__(self, what, expected, got):
        self.what = what
        self.expected = tuple(expected) if expected is not None else None
        self.got = tuple(got) if got is not None else None
        super().__init__(f"{what}: expected shape {self.expected}, got {self.got}")


class ConfigError(TransMemError, ValueError):
    """An invalid configuration value or combination."""


class UsageError(TransMemError):
    """An API was called in a way its contract forbids."""


class FormatError(TransMemError):
    """A file on disk is malformed, truncated, or of an unknown version."""


class NumericError(TransMemError, ArithmeticError):
    """A computation produced NaN or Inf."""
