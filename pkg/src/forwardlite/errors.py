"""Exception hierarchy shared by all forwardlite subsystems."""

from __future__ import annotations


class ForwardError(Exception):
    """Base class for every error raised by forwardlite."""


# --- value model ---------------------------------------------------------


class JsonParseError(ForwardError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class OrdinalOutOfRange(ForwardError):
    pass


class FieldStepOnNonTuple(ForwardError):
    pass


class UnresolvablePath(ForwardError):
    pass


class InvalidDelta(ForwardError):
    def __init__(self, op_index: int, reason: str):
        super().__init__(f"delta op {op_index}: {reason}")
        self.op_index = op_index
        self.reason = reason


class StaleView(ForwardError):
    """Base deltas do not line up with a materialized view's snapshots."""


# --- language ------------------------------------------------------------


class SyntaxError_(ForwardError):
    """Syntax error with source position; formatted as file:line:col: message."""

    def __init__(self, message: str, line: int, col: int, filename: str = "<input>",
                 expected: tuple[str, ...] = ()):
        self.message = message
        self.line = line
        self.col = col
        self.filename = filename
        self.expected = expected
        super().__init__(f"{filename}:{line}:{col}: {message}")


class UnknownName(ForwardError):
    def __init__(self, name: str, candidates: tuple[str, ...] = ()):
        self.name = name
        self.candidates = candidates
        hint = f" (in scope: {', '.join(candidates)})" if candidates else ""
        super().__init__(f"unknown name {name!r}{hint}")


class MutationInImmutable(ForwardError):
    pass


class MutableFunctionInPage(ForwardError):
    pass


class DuplicateAction(ForwardError):
    pass


class InvalidAggregation(ForwardError):
    """A grouped query selects or orders by something that is neither a
    group key nor an aggregate."""
    pass


class UnsupportedFeature(ForwardError):
    """Grammatically valid but outside what this implementation evaluates,
    reported at resolution time rather than mid-query."""
    pass


# --- engine --------------------------------------------------------------


class DuplicateSource(ForwardError):
    pass


class ConnectionFailed(ForwardError):
    pass


class ReadOnlySource(ForwardError):
    pass


class UnresolvableTarget(ForwardError):
    pass


class WriteInReadOnlyMode(ForwardError):
    pass


class EvalError(ForwardError):
    """Runtime type error during query or statement evaluation."""


class UnknownFunction(ForwardError):
    pass


class PlsqlRaise(ForwardError):
    """An uncaught RAISE from a PL/SQL++ body; message is the raised value."""

    def __init__(self, message: str):
        super().__init__(message)
        self.raised_message = message


# --- pages ---------------------------------------------------------------


class UnknownUnitClass(ForwardError):
    pass


class UnitSchemaViolation(ForwardError):
    pass


class WriteToDerived(ForwardError):
    pass


class UnknownEvent(ForwardError):
    pass


class PageEvalError(ForwardError):
    """Query failure during page evaluation, tagged with the directive location."""

    def __init__(self, message: str, location: str):
        super().__init__(f"{location}: {message}")
        self.location = location


# --- server --------------------------------------------------------------


class NoSuchAction(ForwardError):
    pass


class VersionMismatch(ForwardError):
    pass


class AppLoadError(ForwardError):
    pass
