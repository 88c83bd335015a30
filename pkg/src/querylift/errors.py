"""Exception types shared across the toolkit.

Every error raised by this package derives from QueryliftError so the CLI
can map failures to single-line diagnostics uniformly.
"""


class QueryliftError(Exception):
    """Base class for all toolkit errors."""


class StorageError(QueryliftError):
    """I/O failure while persisting or reading an artifact."""


class FormatError(QueryliftError):
    """A file or payload violates its declared format."""


class ContractError(QueryliftError):
    """An operation was called with inputs violating its preconditions."""


class CredentialError(QueryliftError):
    """A remote service rejected or is missing authentication."""


class TransportError(QueryliftError):
    """A remote service stayed unreachable after retries."""


class TrainingError(QueryliftError):
    """The optimization loop hit a non-recoverable numeric state."""
