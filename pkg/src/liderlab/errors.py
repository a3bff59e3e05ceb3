"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """A caller-supplied setting is invalid or inconsistent."""


class NumericError(ArithmeticError):
    """A non-finite value reached a place that requires finite numbers."""


class TapeError(RuntimeError):
    """Misuse of a recorded computation (e.g. a second backward pass)."""
