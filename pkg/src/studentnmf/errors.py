"""Exception types shared across the pipeline stages."""

from __future__ import annotations


class StudentNMFError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(StudentNMFError, ValueError):
    """Input violates a documented precondition or invariant."""


class ParseError(ValidationError):
    """A line of an input file could not be parsed."""

    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class ConfigurationError(ValidationError):
    """Configuration is incomplete or inconsistent (e.g. an unmapped subject)."""


class OverparameterizedWarning(UserWarning):
    """More clusters requested than min(n, m)."""


class KSelectionWarning(UserWarning):
    """The error-decrease threshold never triggered up to k_max."""
