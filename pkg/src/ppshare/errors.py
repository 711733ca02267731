"""Exception types shared across the package."""


class PPShareError(Exception):
    """Base class for all package errors."""


class ValidationError(PPShareError, ValueError):
    """Input violates a documented precondition or invariant."""


class FormatError(PPShareError, ValueError):
    """File does not carry the expected magic bytes or version."""


class CorruptionError(PPShareError, ValueError):
    """File header and payload disagree."""


class InvariantViolation(PPShareError, RuntimeError):
    """A runtime invariant broke (e.g. a class lost all of its prototypes)."""
