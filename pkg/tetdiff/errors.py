"""Exception hierarchy shared by every module."""

from __future__ import annotations

from collections.abc import Sequence


class TetDiffError(Exception):
    """Base class for all tetdiff failures."""


class InvalidResolutionError(TetDiffError):
    pass


class DimensionError(TetDiffError):
    pass


class StateError(TetDiffError):
    pass


class DomainError(TetDiffError):
    pass


class NoCrossingError(TetDiffError):
    pass


class GeometryError(TetDiffError):
    pass


class ParameterError(TetDiffError):
    pass


class FormatError(TetDiffError):
    pass


class VisibilityError(TetDiffError):
    pass


class ParseError(TetDiffError):
    """Malformed line in a text format; `line_number` is 1-based."""

    def __init__(self, message: str, line_number: int) -> None:
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class MeshIndexError(ParseError):
    pass


class NumericError(TetDiffError):
    """NaN/Inf encountered during an iterative computation."""

    def __init__(self, message: str, step: int | None = None) -> None:
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class DivergenceError(TetDiffError):
    def __init__(self, message: str, trace: Sequence[float]) -> None:
        super().__init__(message)
        self.trace = list(trace)


class BatchError(TetDiffError):
    """Every item of a batch failed."""

    def __init__(self, message: str, failures: dict[str, str]) -> None:
        super().__init__(message)
        self.failures = failures


class ConfigError(TetDiffError):
    def __init__(self, message: str, key: str | None = None) -> None:
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key
