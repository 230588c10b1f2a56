"""
Exception taxonomy shared by every module, plus the CLI exit-code mapping.

Exit codes:
    0 success, 1 validation error, 2 runtime failure, 3 verification failure
"""
from __future__ import annotations

from typing import Optional

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_VERIFICATION = 3


class LabError(Exception):
    """Base class for all lab errors."""

    exit_code = EXIT_RUNTIME


class DomainError(LabError, ValueError):
    """Probability input outside [0, 1], non-finite, or a missing head slot."""

    exit_code = EXIT_VALIDATION


class ConfigError(LabError, ValueError):
    exit_code = EXIT_VALIDATION


class LogFormatError(LabError, ValueError):
    """Malformed impression log. `line_number` is 1-based and counts the header."""

    exit_code = EXIT_VALIDATION

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class ReachabilityError(LogFormatError):
    """A record violates a label implication (e.g. pay=1 without click=1)."""

    def __init__(self, implication: str, line_number: Optional[int] = None):
        self.implication = implication
        super().__init__(f"reachability violated: {implication}", line_number)


class CalibrationError(LabError, RuntimeError):
    def __init__(self, head: str, message: str):
        self.head = head
        super().__init__(f"head={head} {message}")


class DivergenceError(LabError, RuntimeError):
    """Non-finite activation, loss or gradient."""


class ShapeMismatchError(LabError, ValueError):
    exit_code = EXIT_RUNTIME


class CheckpointError(LabError, ValueError):
    """Unreadable checkpoint: bad magic, truncated payload or checksum mismatch."""

    exit_code = EXIT_RUNTIME


class DegenerateLabelsError(LabError, ValueError):
    """AUC requested over a label set with a single class."""

    exit_code = EXIT_RUNTIME


class MissingRunsError(LabError, RuntimeError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing runs: " + ", ".join(self.missing))


class VerificationError(LabError, AssertionError):
    exit_code = EXIT_VERIFICATION


def exit_code_for(error: BaseException) -> int:
    """Map an exception to a CLI exit code; unknown errors are runtime failures."""
    if isinstance(error, LabError):
        return error.exit_code
    return EXIT_RUNTIME
