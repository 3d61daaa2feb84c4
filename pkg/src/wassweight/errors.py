"""Exception types shared across the package.

Each class carries the process exit code the CLI maps it to.
"""


class WassweightError(Exception):
    exit_code = 1


class ConfigurationError(WassweightError, ValueError):
    exit_code = 1


class ShapeError(ConfigurationError):
    pass


class CapacityError(ConfigurationError):
    pass


class DataError(WassweightError, ValueError):
    exit_code = 2


class NumericError(WassweightError, ArithmeticError):
    exit_code = 3


class DegenerateDistanceError(NumericError):
    """All subject distances are zero so they cannot be normalised."""


class NormalizationError(ConfigurationError):
    """Regularisers violate the sum-to-one rule (negative group weight)."""

    def __init__(self, message, lambda_g=None):
        super().__init__(message)
        self.lambda_g = lambda_g
