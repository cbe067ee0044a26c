"""Exception types raised by the estimation pipeline."""


class EstimationError(ValueError):
    """A replication or dataset cannot be estimated."""


class EmptyArmError(EstimationError):
    """No unit has the requested exposure value."""


class OverlapError(EstimationError):
    """Propensities are not bounded away from 0 and 1."""

    def __init__(self, message, units=()):
        super().__init__(message)
        self.units = list(units)


class RankDeficientError(EstimationError):
    """A weighted least squares design matrix is not of full column rank."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = list(columns)


class SingularSystemError(EstimationError):
    """The HAC quadratic form in the coefficients is not positive definite."""

    def __init__(self, message, direction=None):
        super().__init__(message)
        self.direction = direction


class NegativeVarianceError(EstimationError):
    """A HAC variance estimate came out negative."""


class ConvergenceError(RuntimeError):
    """An outcome fixed-point iteration did not converge."""
