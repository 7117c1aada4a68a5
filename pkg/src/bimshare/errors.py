"""Exception hierarchy shared by every bimshare module."""

from __future__ import annotations


class BimShareError(Exception):
    """Base class for all library errors."""


class SchemaError(BimShareError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)


class SpfError(BimShareError):
    """Lexical, syntactic or semantic failure while reading a Part-21 file."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = f" at line {line}, column {column}" if line is not None else ""
        super().__init__(message + where)


class ModelError(BimShareError):
    """A model violates a schema or closure invariant."""


class MvdError(BimShareError):
    """A model view could not be parsed or does not fit the schema."""


class ExtractionError(BimShareError):
    pass


class ReplicaDivergenceError(ExtractionError):
    pass


class IntegrationError(BimShareError):
    pass


class ConflictError(IntegrationError):
    def __init__(self, entity_id: str, message: str | None = None):
        self.entity_id = entity_id
        super().__init__(message or f"entity {entity_id} was removed from the base model concurrently")


class IntegrityError(IntegrationError):
    """The integrated model still holds dangling references after correction."""


class FederationError(BimShareError):
    """Error with a wire-level error code; raised locally and re-raised from remote replies."""

    code = "BAD_PAYLOAD"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)
        self.message = message or self.code


class UnknownKind(FederationError):
    code = "UNKNOWN_KIND"


class AuthDenied(FederationError):
    code = "AUTH_DENIED"


class NotOwner(FederationError):
    code = "NOT_OWNER"


class StaleVersion(FederationError):
    code = "STALE_VERSION"


class NotFound(FederationError):
    code = "NOT_FOUND"


class OwnershipClash(FederationError):
    code = "OWNERSHIP_CLASH"


class BadPayload(FederationError):
    code = "BAD_PAYLOAD"


ERRORS_BY_CODE: dict[str, type[FederationError]] = {
    cls.code: cls
    for cls in (UnknownKind, AuthDenied, NotOwner, StaleVersion, NotFound, OwnershipClash, BadPayload)
}


class FrameError(BimShareError):
    """Truncated or oversize wire frame."""


class TransportError(BimShareError):
    """A peer could not be reached or did not answer in time."""
