"""Exception hierarchy shared across the toolkit.

Each class carries an ``exit_code`` so the command line front end can map
failures to distinct process exit statuses.
"""


class IvimError(Exception):
    exit_code = 1


class InvalidArgumentError(IvimError, ValueError):
    exit_code = 2


class ConfigError(InvalidArgumentError):
    exit_code = 2


class DegenerateSignalError(IvimError, ValueError):
    exit_code = 3


class ScheduleMismatchError(IvimError, ValueError):
    exit_code = 4


class ShapeError(IvimError, ValueError):
    exit_code = 5


class UnderdeterminedFitError(IvimError, ValueError):
    exit_code = 6


class NumericFailureError(IvimError, ArithmeticError):
    exit_code = 7

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history


class FormatError(IvimError, ValueError):
    exit_code = 8


class MissingLabelsError(IvimError, ValueError):
    exit_code = 9


class JoinError(IvimError, KeyError):
    exit_code = 10

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class UndefinedStatisticError(IvimError, ValueError):
    """NRMSE or Pearson r requested on inputs where it has no value."""

    exit_code = 11
