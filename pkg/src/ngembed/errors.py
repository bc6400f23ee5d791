"""Exception hierarchy shared by all modules."""


class NgEmbedError(Exception):
    """Base class for every error raised by the toolkit."""


class ConstructionError(NgEmbedError, ValueError):
    """Inconsistent architecture or model definition."""


class NonFiniteError(NgEmbedError, FloatingPointError):
    """A NaN or infinity showed up in an evaluation."""


class SolverError(NgEmbedError):
    """A linear solve could not produce a well-defined answer."""


class NonconvergenceError(NgEmbedError):
    """An iteration stopped without meeting its tolerance.

    ``best`` holds the iterate with the smallest residual seen, ``residual``
    its infinity norm.
    """

    def __init__(self, message, best=None, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.best = best
        self.residual = residual
        self.iterations = iterations


class FitError(NgEmbedError):
    """Initial-condition fit did not reach the requested RMSE."""

    def __init__(self, message, rmse=float("nan"), theta=None):
        super().__init__(message)
        self.rmse = rmse
        self.theta = theta


class ConfigError(NgEmbedError, ValueError):
    """Experiment configuration failed validation."""


class RankDeficiencyWarning(UserWarning):
    """Constraint gradients were linearly dependent and some were dropped."""
