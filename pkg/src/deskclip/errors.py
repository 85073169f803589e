"""Exception types shared across the package.

Every error raised by a public operation subclasses :class:`DeskclipError`,
which carries the process exit code the CLI maps it to (2 = bad config or
input, 3 = missing required input, 4 = numeric failure).
"""

from __future__ import annotations


class DeskclipError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class ZeroRow(DeskclipError):
    """A row that must be normalizable has (near-)zero norm."""

    def __init__(self, row: int):
        super().__init__(f"row {row} has zero L2 norm and cannot be normalized")
        self.row = row


class DimensionMismatch(DeskclipError):
    pass


class ShapeMismatch(DeskclipError):
    pass


class InvalidRate(DeskclipError):
    pass


class UnknownToken(DeskclipError):
    def __init__(self, token: str):
        super().__init__(f"token {token!r} is not in the vocabulary")
        self.token = token


class TraceMismatch(DeskclipError):
    pass


class BatchTooSmall(DeskclipError):
    pass


class EmptyInput(DeskclipError):
    pass


class EmptyClass(DeskclipError):
    pass


class InvalidConfig(DeskclipError):
    pass


class InvalidSchedule(DeskclipError):
    pass


class EmptyDataset(DeskclipError):
    pass


class OverlapLeak(DeskclipError):
    pass


class SpecInvalid(DeskclipError):
    pass


class NeedTwoClasses(DeskclipError):
    pass


class ParseError(DeskclipError):
    def __init__(self, path: str, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line


class MissingPlaceholder(DeskclipError):
    pass


class MissingInput(DeskclipError):
    """A required input (file or loss argument) is absent."""

    exit_code = 3


class NumericFailure(DeskclipError):
    """A non-finite value appeared during optimization."""

    exit_code = 4


class InactiveInputWarning(UserWarning):
    """An input was supplied that the selected variant does not use."""
