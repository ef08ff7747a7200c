"""Exception hierarchy shared by every module."""


class PsetError(Exception):
    """Base class for all package errors."""


class NotSymmetric(PsetError, ValueError):
    pass


class NotPositiveDefinite(PsetError, ValueError):
    pass


class DimensionMismatch(PsetError, ValueError):
    pass


class CholeskyFailure(PsetError, ValueError):
    pass


class NonPositiveScale(PsetError, ValueError):
    pass


class InnovationCovNotPD(PsetError, ValueError):
    pass


class MissingMeasurement(PsetError, ValueError):
    pass


class UnexpectedMeasurement(PsetError, ValueError):
    pass


class InnerMatrixSingular(PsetError, ValueError):
    pass


class CNotFullRowRank(PsetError, ValueError):
    pass


class MaxIterationsExceeded(PsetError, RuntimeError):
    """Fixed-point iteration did not reach tolerance.

    The last residual is kept on ``residual`` so callers can report it.
    """

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class DegenerateRho(PsetError, ValueError):
    pass


class GridTooCoarse(PsetError, ValueError):
    pass
