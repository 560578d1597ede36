"""Exception hierarchy shared across the package."""

from __future__ import annotations


class TaskMergeError(Exception):
    """Base class for every error raised by taskmerge."""


class DomainError(TaskMergeError, ValueError):
    """An input violates an operation's precondition."""


class NumericError(TaskMergeError, ArithmeticError):
    """A numerical routine failed (non-convergence, ill-conditioning, NaN)."""

    def __init__(self, message: str, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class TrainingError(NumericError):
    """A training loop hit a non-finite loss."""
