"""Exception types shared across the package.

The CLI maps these onto process exit codes (see ``ucf.cli``).
"""


class UCFError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(UCFError, ValueError):
    exit_code = 2


class ShapeError(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class UndefinedMetricError(ValidationError):
    """Raised when a metric is undefined for the given labels (e.g. one class only)."""


class NumericError(UCFError, ArithmeticError):
    exit_code = 3


class MissingStageError(UCFError):
    exit_code = 4

    def __init__(self, stage, prerequisite):
        self.stage = stage
        self.prerequisite = prerequisite
        super().__init__(
            f"stage '{stage}' needs the outputs of stage '{prerequisite}'; "
            f"run `ucf {prerequisite}` first (or `ucf all`)"
        )
