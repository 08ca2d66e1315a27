"""Exception and warning types shared across the package."""


class ArealRiskError(Exception):
    """Base class for all package errors."""


class InputError(ArealRiskError, ValueError):
    """Invalid user input: bad geometry, unknown ids, malformed tables."""


class UndefinedStatisticError(ArealRiskError, ValueError):
    """A statistic is undefined for the given data (e.g. zero variance)."""


class SingularDesignError(InputError):
    """Weighted normal equations are singular.

    Attributes
    ----------
    covariate : str
        Name of the first covariate found to be linearly dependent on the
        columns before it.
    """

    def __init__(self, covariate, message=None):
        self.covariate = covariate
        super().__init__(message or f"design matrix is singular; covariate {covariate!r} "
                         "is a linear combination of the preceding columns")


class ConvergenceWarning(UserWarning):
    """An iterative fit or sampler did not meet its convergence criterion."""
