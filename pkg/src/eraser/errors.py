"""Exception types shared across the package."""


class EraserError(Exception):
    """Base class for package errors."""


class GenerationError(EraserError):
    """Scene generation could not satisfy its constraints."""


class ConfigurationError(EraserError):
    """A configuration value or combination is invalid."""


class IntegrityError(EraserError):
    """A persisted store or ledger failed a consistency check."""


class ConflictError(EraserError):
    """A write lost a race against another writer (no silent overwrite)."""


class NotFoundError(EraserError):
    """A referenced record does not exist."""
