"""Exception types shared across the package."""

import numpy as np


class ConfigError(ValueError):
    """Invalid task family, hyper-parameter or sweep configuration."""


class SingularSystemError(np.linalg.LinAlgError):
    """A linear system that must be solved exactly is (numerically) singular."""

    def __init__(self, message, eigenvalue=None):
        super().__init__(message)
        self.eigenvalue = eigenvalue


class StepSizeError(RuntimeError):
    """An iterative solver diverged, usually because the step size is too large."""


class NumericalError(ArithmeticError):
    """Non-finite values or a broken numerical assumption (e.g. lost positive definiteness)."""


class EstimatorError(RuntimeError):
    """A per-task estimator failure re-raised with the task index attached."""

    def __init__(self, task_index, cause):
        super().__init__(f"task {task_index}: {type(cause).__name__}: {cause}")
        self.task_index = task_index
        self.cause = cause


class FitError(ValueError):
    """Not enough usable points for a log-log regression."""
