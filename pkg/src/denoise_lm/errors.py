"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value is invalid or missing.

    ``key`` holds the dotted path of the offending key when known.
    """

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class DataError(ValueError):
    """Input data violates a precondition (empty mask, bad label, ...)."""


class NumericError(FloatingPointError):
    """A non-finite value appeared where finite values are required."""
