"""Exception types shared across the package."""


class SkelikError(Exception):
    """Base class for all package errors."""


class DegenerateInput(SkelikError, ValueError):
    pass


class AmbiguousAverage(SkelikError, ValueError):
    pass


class ShapeMismatch(SkelikError, ValueError):
    pass


class BehindCamera(SkelikError, ValueError):
    pass


class NonFinite(SkelikError, FloatingPointError):
    """Raised when a loss or iterate stops being finite.

    ``where`` names the offending sample or iteration.
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class InsufficientConstraints(SkelikError, ValueError):
    pass


class FormatError(SkelikError):
    """A file on disk has the wrong kind or version."""
