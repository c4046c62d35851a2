"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class MemweaveError(Exception):
    """Base class for all engine errors."""


# memory model
class ReplaceTargetNotFound(MemweaveError):
    pass


class DanglingReference(MemweaveError):
    pass


class IllegalAction(MemweaveError):
    pass


# vectors
class DimensionMismatch(MemweaveError):
    pass


# gateway
class GatewayError(MemweaveError):
    pass


class TransportError(GatewayError):
    pass


class RateLimitedExhausted(GatewayError):
    pass


class BadStatus(GatewayError):
    def __init__(self, code: int, message: str = ""):
        self.code = code
        super().__init__(message or f"unexpected HTTP status {code}")


class ScriptExhausted(GatewayError):
    pass


# action codec
class ActionError(MemweaveError):
    """Any failure turning raw agent text into operations.

    ``kind`` is one of ``malformed_json``, ``unknown_action``, ``missing_field``,
    ``invalid_field``, ``illegal_action_for_type`` or ``resolution_failure``.
    """

    kind = "action_error"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def diagnostic(self) -> str:
        return f"{self.kind}: {self.message}"


class MalformedJson(ActionError):
    kind = "malformed_json"


class UnknownAction(ActionError):
    kind = "unknown_action"


class MissingField(ActionError):
    kind = "missing_field"

    def __init__(self, field: str, context: str = ""):
        self.field = field
        super().__init__(f"{field}" + (f" ({context})" if context else ""))


class InvalidField(ActionError):
    kind = "invalid_field"


class IllegalActionForType(ActionError):
    kind = "illegal_action_for_type"


class ResolutionFailure(ActionError):
    kind = "resolution_failure"


# reward / attribution / math
class EmptyQuestionSet(MemweaveError):
    pass


class AlphaOutOfRange(MemweaveError):
    pass


class GroupTooSmall(MemweaveError):
    pass


class ShapeMismatch(MemweaveError):
    pass


class SupportMismatch(MemweaveError):
    pass


# ingestion
class UnknownFormat(MemweaveError):
    pass


class EmptyDataset(MemweaveError):
    pass
