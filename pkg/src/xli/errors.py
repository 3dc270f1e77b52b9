"""Error taxonomy shared across the workbench.

ValidationError subclasses map to CLI exit code 1, runtime failures to 2.
"""

from __future__ import annotations


class ValidationError(ValueError):
    """Bad input: malformed file, violated precondition, inconsistent config."""


class SchemaError(ValidationError):
    """A structured data file failed validation; carries file and line context."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        loc = ""
        if path is not None:
            loc = f"{path}:" if line is None else f"{path}:{line}:"
        super().__init__(f"{loc} {message}".strip())
        self.path = path
        self.line = line


class TrainingDiverged(RuntimeError):
    """Non-finite loss encountered during optimization."""


class StageError(RuntimeError):
    """A pipeline stage failed; wraps the originating error with the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
