"""Exception hierarchy.

The CLI maps these onto exit codes: configuration problems exit with 2,
data problems with 3 and numerical failures with 4.
"""


class CenselectError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(CenselectError, ValueError):
    exit_code = 2


class DataError(CenselectError, ValueError):
    exit_code = 3


class NumericalError(CenselectError, ArithmeticError):
    exit_code = 4


class ConvergenceError(NumericalError):
    """Iterative fit stopped before meeting its tolerance.

    The last iterate is kept on ``iterate`` so callers can inspect it.
    """

    def __init__(self, message, iterate=None):
        super().__init__(message)
        self.iterate = iterate


class SeparationError(NumericalError):
    pass


class SingularInformationError(NumericalError):
    pass


class DegenerateFoldsError(NumericalError):
    pass
