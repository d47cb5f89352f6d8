"""Exception types shared across the package.

Everything raised on purpose derives from :class:`EcholocError` so callers
(and the CLI) can separate expected failures from genuine bugs.  Errors that
indicate bad user input additionally derive from ``ValueError``.
"""


class EcholocError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(EcholocError, ValueError):
    """A static configuration value is invalid (aliasing, bad enum, ...)."""


class ArgumentError(EcholocError, ValueError):
    """A runtime argument violates a precondition."""


class DomainError(EcholocError, ValueError):
    """A numeric input is outside the physical domain of a formula."""


class NoSignalError(EcholocError):
    """The received samples carry no usable signal (e.g. all zeros)."""


class GeometryError(EcholocError):
    """Beacon/target geometry is degenerate (coplanar, coincident, singular)."""


class EchoInconsistencyError(EcholocError):
    """An echo round trip implies a height outside the room."""


class ValidationError(EcholocError, ValueError):
    """A scenario or result failed validation.  ``field`` names the culprit."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class ParseError(EcholocError, ValueError):
    """A scenario file could not be parsed.  Carries location context."""
