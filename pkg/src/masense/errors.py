"""Exception types raised across the package."""


class MasenseError(Exception):
    """Base class for all package errors."""


class InvalidInputError(MasenseError, ValueError):
    """Malformed or out-of-contract input (shapes, non-finite values, K >= N)."""


class SingularFimError(MasenseError, ArithmeticError):
    """The Fisher information is (numerically) singular.

    Almost always means two targets coincide. ``pair`` names the closest
    target pair when known, ``sample`` the Monte Carlo realization index.
    """

    def __init__(self, message, pair=None, sample=None):
        super().__init__(message)
        self.pair = pair
        self.sample = sample


class DegenerateGeometryError(MasenseError, ValueError):
    """The antenna layout has no spread along an axis (collinear/coincident)."""


class GradientEvaluationError(MasenseError, RuntimeError):
    """The objective failed at one of the finite-difference probe points."""
