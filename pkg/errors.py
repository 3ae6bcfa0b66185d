"""
Exception types shared by the retargeting engine and the CLI exit codes they map to.
"""
from typing import Optional

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class RetargetError(Exception):
    """Base class for every error raised by the engine."""

    exit_code = EXIT_CONFIG


class ConfigurationError(RetargetError, ValueError):
    """Invalid configuration: unknown op kinds, width mismatches, bad run settings."""

    exit_code = EXIT_CONFIG


class UsageError(RetargetError, ValueError):
    """An API was called with arguments it cannot accept (shapes, handles, names)."""

    exit_code = EXIT_CONFIG


class ParseError(RetargetError, ValueError):
    """A robot or demo file could not be parsed."""

    exit_code = EXIT_IO

    def __init__(self, path: str, message: str, line: Optional[int] = None, field: Optional[str] = None):
        self.path = str(path)
        self.line = line
        self.field = field
        where = self.path if line is None else f"{self.path}:{line}"
        if field:
            where = f"{where} [{field}]"
        super().__init__(f"{where}: {message}")


class ValidationError(RetargetError, ValueError):
    """Parsed data violates a model or demonstration invariant."""

    exit_code = EXIT_IO


class CheckpointError(RetargetError):
    """Checkpoint unreadable or built for another topology."""

    exit_code = EXIT_IO


class EvaluationError(RetargetError, ArithmeticError):
    """A function evaluated during gradient checking returned a non-finite value."""

    exit_code = EXIT_NUMERIC

    def __init__(self, message: str, coordinate: Optional[int] = None):
        self.coordinate = coordinate
        if coordinate is not None:
            message = f"{message} (coordinate {coordinate})"
        super().__init__(message)


class DegeneratePointError(EvaluationError):
    """Gradient check point lies too close to a kink to be compared with finite differences."""


class NumericalError(RetargetError, ArithmeticError):
    """Training or optimisation produced a non-finite loss."""

    exit_code = EXIT_NUMERIC

    def __init__(self, message: str, frame: Optional[int] = None):
        self.frame = frame
        if frame is not None:
            message = f"{message} (frame {frame})"
        super().__init__(message)


def exit_code_for(error: BaseException) -> int:
    """Map an exception raised by a command to the process exit code."""
    if isinstance(error, RetargetError):
        return error.exit_code
    if isinstance(error, OSError):
        return EXIT_IO
    if isinstance(error, (FloatingPointError, ArithmeticError)):
        return EXIT_NUMERIC
    return 1
