"""Exception types shared across the package.

The CLI maps each family onto its own exit code, so library code raises the
most specific class available instead of a bare ``ValueError``.
"""

from __future__ import annotations

from typing import Any


class GradLibraError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(GradLibraError, ValueError):
    """Invalid configuration value (alpha out of range, bad schedule, ...)."""


class InputValidationError(GradLibraError, ValueError):
    """Numeric input that violates a precondition, e.g. NaN logits."""


class DimensionError(GradLibraError, ValueError):
    """Array shapes that do not line up."""


class DataError(GradLibraError):
    """Malformed or missing dataset files."""


class ParseError(DataError):
    def __init__(self, message: str, line: int) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class UnsupportedArchError(GradLibraError):
    pass


class UndefinedAPError(GradLibraError, ValueError):
    """Average precision requested for a class without positives."""


class NumericError(GradLibraError, FloatingPointError):
    """Training diverged. ``snapshot`` holds enough state to debug the step."""

    def __init__(self, message: str, snapshot: dict[str, Any] | None = None) -> None:
        super().__init__(message)
        self.snapshot = snapshot or {}
