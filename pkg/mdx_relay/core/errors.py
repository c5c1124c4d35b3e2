"""
Error types for the relay agent, storage service and network harness.

Every error carries a stable string code and the HTTP status the service
answers with. Classes are registered through the ``error_code`` decorator so
the client can map a ``{code, message, detail}`` body back to the same class.
"""

from typing import Any, Callable, Dict, Optional, Type


class RelayError(Exception):
    """Base class for all mdx-relay errors."""

    code = "RELAY_ERROR"
    status = 500

    def __init__(self, message: str = "", detail: Any = None):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.detail = detail

    def to_payload(self) -> Dict[str, Any]:
        """Render the uniform JSON error body."""
        return {"code": self.code, "message": self.message, "detail": self.detail}


class ErrorRegistry:
    """
    Registry mapping stable error codes to exception classes.

    The registry is filled at import time by ``error_code`` and consulted by
    the client when it decodes service error bodies.
    """

    def __init__(self):
        """Initialize the error registry."""
        self.errors: Dict[str, Type[RelayError]] = {}

    def register_error(self, cls: Type[RelayError]) -> None:
        """
        Register an error class under its code.

        Args:
            cls: Error class carrying ``code`` and ``status`` attributes
        """
        existing = self.errors.get(cls.code)
        if existing is not None and existing is not cls:
            raise ValueError(f"error code {cls.code!r} already registered by {existing.__name__}")
        self.errors[cls.code] = cls

    def get_error(self, code: str) -> Optional[Type[RelayError]]:
        """
        Get an error class by code.

        Args:
            code: Stable error code

        Returns:
            Error class or None if the code is unknown
        """
        return self.errors.get(code)

    def get_all_codes(self) -> Dict[str, int]:
        """Return every registered code with its HTTP status."""
        return {code: cls.status for code, cls in sorted(self.errors.items())}


ERRORS = ErrorRegistry()


def error_code(code: str, status: int = 500) -> Callable[[Type[RelayError]], Type[RelayError]]:
    """
    Decorator to give an error class its stable code and HTTP status.

    Args:
        code: Stable string code sent in error bodies
        status: HTTP status code the service answers with

    Returns:
        Class decorator registering the error

    Example:
        ```python
        @error_code("QUOTA_EXCEEDED", status=413)
        class QuotaExceeded(RelayError):
            pass
        ```
    """

    def decorator(cls: Type[RelayError]) -> Type[RelayError]:
        cls.code = code
        cls.status = status
        ERRORS.register_error(cls)
        return cls

    return decorator


def error_from_payload(payload: Any, status: int) -> RelayError:
    """
    Rebuild an error from a service error body.

    Args:
        payload: Decoded JSON body, expected to hold ``code``, ``message`` and ``detail``
        status: HTTP status of the response

    Returns:
        Instance of the registered class, or a generic ``RelayError``
    """
    if not isinstance(payload, dict):
        err = RelayError(f"unexpected error response (HTTP {status})", detail=payload)
        err.status = status
        return err

    cls = ERRORS.get_error(str(payload.get("code", "")))
    message = str(payload.get("message", ""))
    if cls is None:
        err = RelayError(message or f"HTTP {status}", detail=payload.get("detail"))
        err.code = str(payload.get("code", RelayError.code))
        err.status = status
        return err

    err = cls.__new__(cls)
    RelayError.__init__(err, message, payload.get("detail"))
    return err


@error_code("INVALID_PARAMETER", status=400)
class ParameterError(RelayError):
    """A parameter is outside its allowed range."""


@error_code("CONFIG_ERROR", status=400)
class ConfigError(RelayError):
    """Configuration could not be loaded or is invalid."""


@error_code("MANIFEST_INVALID", status=422)
class ManifestValidationError(RelayError):
    """A manifest violates one or more of its invariants."""

    def __init__(self, violations, message: str = ""):
        violations = list(violations)
        names = ", ".join(v["invariant"] for v in violations)
        super().__init__(message or f"manifest invariants violated: {names}", detail=violations)


@error_code("INCONSISTENT_STATE", status=400)
class ConsistencyError(RelayError):
    """Acknowledged chunk indices do not fit the manifest."""


@error_code("STATE_MACHINE_VIOLATION", status=409)
class StateMachineViolation(RelayError):
    """A transfer event is not allowed in the current phase."""

    def __init__(self, phase: Any, event: Any, message: str = ""):
        phase_name = getattr(phase, "value", phase)
        event_name = type(event).__name__ if not isinstance(event, str) else event
        super().__init__(
            message or f"event {event_name} not allowed in phase {phase_name}",
            detail={"phase": phase_name, "event": event_name},
        )
        self.phase = phase
        self.event = event


@error_code("AUTH_REJECTED", status=401)
class AuthenticationRejected(RelayError):
    """Device credentials were not accepted."""


@error_code("RATE_LIMITED", status=429)
class RateLimited(RelayError):
    """Too many failed authentication attempts."""


@error_code("TOKEN_EXPIRED", status=401)
class TokenExpired(RelayError):
    """The bearer token is unknown or past its expiry."""


@error_code("NOT_AUTHORIZED", status=403)
class AuthorizationError(RelayError):
    """The device is not allowed to act for the requested owner."""


@error_code("QUOTA_EXCEEDED", status=413)
class QuotaExceeded(RelayError):
    """A reservation would exceed the owner's hard quota."""


@error_code("CHUNK_DIGEST_MISMATCH", status=422)
class ChunkDigestMismatch(RelayError):
    """A chunk payload does not match its manifest record."""


@error_code("CHUNK_CONFLICT", status=409)
class ChunkConflict(RelayError):
    """An already acknowledged chunk was re-sent with different content."""


@error_code("UPLOAD_NOT_FOUND", status=404)
class UploadSessionError(RelayError):
    """The upload session is unknown, voided or owned by another device."""


@error_code("UPLOAD_INCOMPLETE", status=409)
class UploadIncomplete(RelayError):
    """Completion was requested while chunks are still pending."""


@error_code("INTEGRITY_FAILURE", status=422)
class IntegrityFailure(RelayError):
    """The reassembled file does not match the manifest whole digest."""


@error_code("OBJECT_NOT_FOUND", status=404)
class ObjectNotFound(RelayError):
    """No visible object at this path for this requester."""


@error_code("OBJECT_CORRUPTED", status=500)
class ObjectCorrupted(RelayError):
    """Stored bytes no longer match the recorded digest."""


@error_code("NETWORK_ERROR", status=503)
class TransientNetworkError(RelayError):
    """The service could not be reached; the call may be retried."""


@error_code("JOURNAL_CORRUPT", status=500)
class JournalCorruptError(RelayError):
    """The transfer journal is damaged before its final line."""


@error_code("SOURCE_MISSING", status=404)
class SourceMissing(RelayError):
    """The staged source file disappeared."""


@error_code("SHAPER_STARTUP", status=500)
class ShaperStartupError(RelayError):
    """The shaping proxy could not bind its listening socket."""


@error_code("ENDPOINT_UNREACHABLE", status=504)
class UnreachableError(RelayError):
    """An echo round trip did not complete in time."""


@error_code("BENCH_RUN_FAILED", status=500)
class BenchRunError(RelayError):
    """A benchmark run did not deliver every file intact."""


@error_code("ROUTE_ORDERING", status=500)
class RouteOrderingError(RelayError):
    """Measured profiles do not preserve the expected ordering."""


@error_code("SERVICE_LOCKED", status=500)
class ServiceLocked(RelayError):
    """Another service instance already owns the data root."""
