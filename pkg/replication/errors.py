"""
Exception and warning types shared by the replication modules.
Each exception carries the exit code the command-line runner maps it to.
"""

from typing import Optional, Sequence

import numpy as np


class ReplicationError(Exception):
    """Base class for every failure the pipeline knows how to report"""
    exit_code = 1


class ConfigError(ReplicationError, ValueError):
    """Invalid, unknown or non-finite configuration values"""
    exit_code = 2


class DataError(ReplicationError, ValueError):
    """Inputs that are empty, malformed or inconsistent"""
    exit_code = 3


class NumericalError(ReplicationError, ArithmeticError):
    """A numerical procedure could not produce a trustworthy answer"""
    exit_code = 4


class RankDeficientError(NumericalError):
    """Design matrix is (numerically) rank deficient"""

    def __init__(self, message: str, columns: Sequence[str] = ()):
        super().__init__(message)
        self.columns = list(columns)


class ConvergenceError(NumericalError):
    """Iterative solver stopped before meeting its tolerance"""

    def __init__(self, message: str, last_iterate: Optional[np.ndarray] = None, n_iter: int = 0):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.n_iter = n_iter


class WeakInstrumentWarning(UserWarning):
    """First-stage instrument F-statistic below 10"""


class DroppedColumnWarning(UserWarning):
    """A zero-variance column was removed before estimation"""


class LassoConvergenceWarning(UserWarning):
    """Coordinate descent hit its sweep budget"""


class QuantileFallbackWarning(UserWarning):
    """Quantile solver did not converge; its last iterate is used instead"""


LIBRARY_NUMERICAL_ERRORS = (np.linalg.LinAlgError, FloatingPointError, ZeroDivisionError, OverflowError)
LIBRARY_DATA_ERRORS = (ValueError, LookupError, TypeError)


def as_replication_error(error: BaseException) -> ReplicationError:
    """Map a numpy/pandas failure onto the exit-code hierarchy"""
    if isinstance(error, ReplicationError):
        return error
    message = f"{type(error).__name__}: {error}"
    # LinAlgError is also a ValueError
    if isinstance(error, LIBRARY_NUMERICAL_ERRORS):
        return NumericalError(message)
    return DataError(message)
