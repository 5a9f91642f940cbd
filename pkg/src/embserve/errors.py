"""Exception hierarchy. Class names double as wire error codes."""

from __future__ import annotations


class EmbServeError(Exception):
    """Base class; ``code`` is what goes over the line protocol."""

    @property
    def code(self) -> str:
        return type(self).__name__


class InvalidIdentifier(EmbServeError, ValueError):
    pass


class DimensionMismatch(EmbServeError, ValueError):
    pass


class NonFiniteComponent(EmbServeError, ValueError):
    pass


class MalformedLine(EmbServeError, ValueError):
    def __init__(self, line_no: int, reason: str) -> None:
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class NonMonotoneTimeFrame(EmbServeError, ValueError):
    pass


class RegressingVersion(EmbServeError, ValueError):
    pass


class UnknownVersion(EmbServeError, LookupError):
    pass


class UnknownEmbeddingType(EmbServeError, LookupError):
    pass


class EmptyAttributeSet(EmbServeError, ValueError):
    pass


class DuplicateItemId(EmbServeError, ValueError):
    pass


class UnknownItem(EmbServeError, LookupError):
    pass


class SealedGeneration(EmbServeError, RuntimeError):
    """Raised on any mutation attempt against a sealed index generation."""


class WrongIndexMode(EmbServeError, RuntimeError):
    pass


class ServiceUnavailable(EmbServeError, RuntimeError):
    """Retryable failure of a remote dependency."""


class EOUnavailable(ServiceUnavailable):
    pass


class EngineUnavailable(ServiceUnavailable):
    pass


class InvalidScenario(EmbServeError, ValueError):
    pass


class ReplayDivergence(EmbServeError, RuntimeError):
    pass


class InvariantViolation(EmbServeError, AssertionError):
    pass
