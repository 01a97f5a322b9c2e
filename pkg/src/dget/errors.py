"""Error hierarchy.

Every kernel error carries a stable ``code`` string that travels over the
wire in error replies, so remote callers can re-raise the same class.
"""

from __future__ import annotations


class DgetError(Exception):
    code = "error"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)
        self.message = message or self.code


# messaging
class UnknownEntity(DgetError):
    code = "unknown-entity"


class EntityTerminated(DgetError):
    code = "entity-terminated"


class QueueFull(DgetError):
    code = "queue-full"


class PayloadTooLarge(DgetError):
    code = "payload-too-large"


class InconsistentTotal(DgetError):
    code = "inconsistent-total"


class ChecksumMismatch(DgetError):
    code = "checksum-mismatch"


class AlreadyBuffering(DgetError):
    code = "already-buffering"


class MigrationAborted(DgetError):
    code = "migration-aborted"


# transport
class PipeClosed(DgetError):
    code = "pipe-closed"


class FrameTooLarge(DgetError):
    code = "frame-too-large"


class NoCommonProtocol(DgetError):
    code = "no-common-protocol"


class ConnectTimeout(DgetError):
    code = "connect-timeout"


class HandshakeVersionMismatch(DgetError):
    code = "handshake-version-mismatch"


class CorruptFrame(DgetError):
    code = "corrupt-frame"


class UnsupportedProtocol(DgetError):
    code = "unsupported-protocol"


class InvalidScenario(DgetError):
    code = "invalid-scenario"


class RequestTimeout(DgetError):
    code = "request-timeout"


# entity
class AccessDenied(DgetError):
    code = "access-denied"


class UnknownCapability(DgetError):
    code = "unknown-capability"


class CapabilitySelectionRequired(DgetError):
    code = "capability-selection-required"


class QuotaExceeded(DgetError):
    code = "quota-exceeded"


class CoreInitFailed(DgetError):
    code = "core-init-failed"


class DuplicateCommunity(DgetError):
    code = "duplicate-community"


class UnknownCommunity(DgetError):
    code = "unknown-community"


class UnknownActivity(DgetError):
    code = "unknown-activity"


class UnknownSubscription(DgetError):
    code = "unknown-subscription"


class NoMatchingCapability(DgetError):
    code = "no-matching-capability"


class DestinationUnreachable(DgetError):
    code = "destination-unreachable"


class SnapshotFailed(DgetError):
    code = "snapshot-failed"


class SourceRefused(DgetError):
    code = "source-refused"


class MigrationInProgress(DgetError):
    code = "migration-in-progress"


class IllegalTransition(DgetError):
    code = "illegal-transition"


class UnsupportedOperation(DgetError):
    code = "unsupported-operation"


# nucleus
class DuplicateId(DgetError):
    code = "duplicate-id"


class InvalidDescriptor(DgetError):
    code = "invalid-descriptor"


class Unroutable(DgetError):
    code = "unroutable"


class ListenFailed(DgetError):
    code = "listen-failed"


class InvalidConfig(DgetError):
    code = "invalid-config"


# security
class PolicyParseError(DgetError):
    code = "policy-parse-error"


# discovery
class BootstrapUnreachable(DgetError):
    code = "bootstrap-unreachable"


_BY_CODE: dict[str, type[DgetError]] = {}


def _register_all() -> None:
    stack = [DgetError]
    while stack:
        cls = stack.pop()
        _BY_CODE[cls.code] = cls
        stack.extend(cls.__subclasses__())


_register_all()


def from_code(code: str, message: str = "") -> DgetError:
    """Rehydrate an error from its wire code; unknown codes become DgetError."""
    cls = _BY_CODE.get(code, DgetError)
    err = cls(message)
    if cls is DgetError:
        err.code = code or "error"
    return err
