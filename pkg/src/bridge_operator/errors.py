"""Exception hierarchy shared across the operator, worker, adapters and staging."""

from __future__ import annotations


class BridgeError(Exception):
    """Base class for every error raised by this package."""


class SchemaError(BridgeError):
    """A BridgeJob document failed validation.

    ``errors`` holds one entry per offending field, each prefixed by the
    field path, so callers can report every problem at once.
    """

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid BridgeJob: " + "; ".join(self.errors))


class StoreError(BridgeError):
    pass


class AlreadyExists(StoreError):
    pass


class NotFound(StoreError):
    pass


class VersionConflict(StoreError):
    def __init__(self, key, expected: int, actual: int):
        self.key = key
        self.expected = expected
        self.actual = actual
        super().__init__(f"{key[0]}/{key[1]}: expected version {expected}, found {actual}")


class StoreClosed(StoreError):
    pass


class InvalidState(BridgeError):
    pass


class AdapterError(BridgeError):
    pass


class AuthError(AdapterError):
    pass


class Unreachable(AdapterError):
    pass


class SubmitRejected(AdapterError):
    pass


class NotFoundRemote(AdapterError):
    pass


class FileMissing(AdapterError):
    pass


class Unsupported(AdapterError):
    pass


class StagingError(BridgeError):
    pass


class ObjectMissing(StagingError):
    pass


class DigestMismatch(StagingError):
    pass


class StorageUnreachable(StagingError):
    pass
