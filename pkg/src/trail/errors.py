"""Exception hierarchy shared by every trail module."""

from __future__ import annotations


class TrailError(Exception):
    """Base class for all errors raised by trail."""


# -- graph store ------------------------------------------------------------


class DuplicateId(TrailError):
    pass


class InvariantViolation(TrailError):
    pass


class MissingEndpoint(TrailError):
    pass


class UnknownElement(TrailError):
    pass


class UnknownEntity(UnknownElement):
    pass


class UnknownEdge(UnknownElement):
    pass


class TruthImmutable(TrailError):
    pass


class IoFailure(TrailError):
    pass


class MalformedRecord(TrailError):
    """A line of a record file failed validation."""

    def __init__(self, line: int, message: str, path: str | None = None) -> None:
        self.line = line
        self.path = path
        where = f"{path}:{line}" if path else f"line {line}"
        super().__init__(f"{where}: {message}")


# -- embedding index --------------------------------------------------------


class DimensionMismatch(TrailError):
    pass


class ZeroNorm(TrailError):
    pass


class EmptyIndex(TrailError):
    pass


# -- model gateway ----------------------------------------------------------


class Misconfiguration(TrailError):
    pass


class TransportFailure(TrailError):
    """Retryable failure talking to a model backend."""


class ScriptExhausted(TrailError):
    """The scripted backend was asked for more replies than its scenario holds."""


class UnparsableReply(TrailError):
    pass


class UnparsableJudgeReply(UnparsableReply):
    pass


# -- refinement / agent -----------------------------------------------------


class MalformedConsensus(TrailError):
    pass


class InvalidSelection(TrailError):
    pass


class SeedFailure(TrailError):
    pass
