"""Exception hierarchy.

Every error carries the CLI exit code it maps to, so commands never need
their own translation tables.
"""

from __future__ import annotations


class ZoorunError(Exception):
    exit_code = 2


class UsageError(ZoorunError):
    exit_code = 1


# -- data / validation (exit 2) ---------------------------------------------

class DataError(ZoorunError):
    exit_code = 2


class ShapeMismatch(DataError):
    pass


class BadAxes(DataError):
    pass


class OutOfBounds(DataError):
    pass


class DTypeMismatch(DataError):
    pass


class ParseError(DataError):
    pass


class SchemaError(DataError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class NonIntegralScale(DataError):
    def __init__(self, axis, message: str):
        self.axis = axis
        super().__init__(message)


class BadTile(DataError):
    pass


class ProcessingError(DataError):
    pass


class GraphError(DataError):
    pass


class OddSizeError(GraphError):
    pass


class UnpackError(DataError):
    pass


class VerificationFailed(DataError):
    """A model's outputs did not reproduce its bundled test outputs."""


# -- engine / worker (exit 3) -----------------------------------------------

class EngineError(ZoorunError):
    exit_code = 3


class NoCompatibleEngine(EngineError):
    def __init__(self, message: str, candidates=()):
        self.candidates = list(candidates)
        if self.candidates:
            near = ", ".join(c.label for c in self.candidates)
            message = f"{message} (nearest: {near})"
        super().__init__(message)


class FetchError(EngineError):
    pass


class AlreadyInstalling(EngineError):
    pass


class WorkerSpawnError(EngineError):
    pass


class LoadError(EngineError):
    pass


class InferenceError(EngineError):
    pass


class ProtocolError(EngineError):
    pass


class WorkerCrashed(EngineError):
    pass


class SessionClosed(EngineError):
    pass


class WorkerTimeout(EngineError, TimeoutError):
    pass


# -- integrity (exit 4) -----------------------------------------------------

class ChecksumMismatch(ZoorunError):
    exit_code = 4

    def __init__(self, what: str, expected: str, actual: str):
        self.expected = expected
        self.actual = actual
        super().__init__(f"checksum mismatch for {what}: expected {expected}, got {actual}")
