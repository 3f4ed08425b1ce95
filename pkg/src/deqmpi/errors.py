"""Exception hierarchy. CLI exit codes are attached to the classes."""


class DeqMpiError(Exception):
    exit_code = 1


class ShapeError(DeqMpiError, ValueError):
    exit_code = 1


class ConfigError(DeqMpiError, ValueError):
    exit_code = 2


class FormatError(DeqMpiError, ValueError):
    exit_code = 2


class NumericError(DeqMpiError, ArithmeticError):
    exit_code = 3


class FactorizationError(NumericError):
    pass


class DivergenceError(NumericError):
    """Raised when a fixed-point iteration produces non-finite values.

    ``history`` holds the residuals recorded up to the failure.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class BackwardDivergenceError(DivergenceError):
    pass


class PreconditionError(DeqMpiError, ValueError):
    exit_code = 1


class DegenerateSignalError(DeqMpiError, ValueError):
    exit_code = 1
