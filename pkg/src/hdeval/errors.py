"""Exception hierarchy shared across hdeval modules."""

from __future__ import annotations


class HDEvalError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(HDEvalError, ValueError):
    pass


class TreeError(ValidationError):
    """Raised for invalid tree construction or lookups."""


class UnknownNodeError(TreeError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else "unknown node"


class TransportError(HDEvalError):
    """The backend could not be reached after all retries."""


class DecompositionParseError(HDEvalError):
    def __init__(self, message: str, raw: str) -> None:
        super().__init__(message)
        self.raw = raw


class ReplayMissError(HDEvalError, KeyError):
    def __init__(self, key: str, detail: str = "") -> None:
        msg = f"replay cache miss for key {key}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.key = key

    def __str__(self) -> str:
        return str(self.args[0])


class DimensionMismatchError(ValidationError):
    pass


class UndefinedCorrelationError(HDEvalError, ValueError):
    """Correlation is undefined because one input is constant."""


class DatasetError(ValidationError):
    def __init__(self, message: str, line: int | None = None) -> None:
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ArtifactError(HDEvalError):
    pass


class DigestMismatchError(ArtifactError):
    pass
