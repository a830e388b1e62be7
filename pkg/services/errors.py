# services/errors.py
from __future__ import annotations

from typing import Any, Optional


class PipelineError(Exception):
    """Base class for every failure the pipeline reports with an exit code."""

    exit_code = 2


class UsageError(PipelineError):
    exit_code = 1


class DataError(PipelineError):
    exit_code = 2


class ObjParseError(DataError):
    def __init__(self, message: str, line: int, path: Optional[str] = None) -> None:
        where = f"{path}:{line}" if path else f"line {line}"
        super().__init__(f"{where}: {message}")
        self.line = line
        self.path = path


class SceneGraphError(DataError):
    pass


class TagDictionaryError(DataError):
    pass


class DegenerateGeometryError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class NumericFailureError(PipelineError):
    """NaN/Inf met during optimization; ``last_good`` holds the last finite parameters."""

    exit_code = 3

    def __init__(self, message: str, last_good: Any = None) -> None:
        super().__init__(message)
        self.last_good = last_good


class MrfError(PipelineError):
    exit_code = 3
