"""Exception types shared across the package."""

import numpy as np


class SingularMatrixError(np.linalg.LinAlgError):
    """A matrix that must be positive definite failed to factorize.

    ``index`` names the offending condition (or class), when there is one.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class FitError(RuntimeError):
    """Optimization produced a non-finite objective."""

    def __init__(self, message, iteration=None, term=None):
        super().__init__(message)
        self.iteration = iteration
        self.term = term
