"""Exception types shared across the package."""


class RafLabError(Exception):
    """Base class for all package errors."""


class DimensionError(RafLabError, ValueError):
    """Input arity does not match what the network or problem expects."""


class ParameterError(RafLabError, ValueError):
    """A configuration value is out of its legal range."""


class NumericOverflowError(RafLabError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class UnsupportedDerivativeError(RafLabError):
    """A derivative was requested from a function that does not supply it
    (floor/step, or orders beyond what an activation provides)."""


class CapacityError(RafLabError, ValueError):
    """A constructive builder was given a width/depth budget that violates
    its size precondition.  The message names the failed inequality."""


class DegenerateKernelError(RafLabError, ArithmeticError):
    """A kernel matrix is numerically singular where an inverse is needed."""


class UndefinedMetricError(RafLabError, ZeroDivisionError):
    """A relative metric was requested against an identically-zero reference."""


class SignalFormatError(RafLabError, ValueError):
    """A signal file could not be parsed.  Carries the byte offset at which
    parsing failed."""

    def __init__(self, message: str, offset: int = -1):
        self.offset = offset
        if offset >= 0:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class ConfigError(RafLabError, ValueError):
    """An experiment config file failed validation.  The message carries the
    offending key path(s)."""
