"""Exception types shared across the package."""


class IFMError(Exception):
    """Base class for all package errors."""


class UsageError(IFMError, ValueError):
    """Caller violated a precondition (shape mismatch, empty input, bad range)."""


class DegenerateInputError(IFMError, ValueError):
    """Input is well-formed but mathematically degenerate (zero norm, constant series)."""


class FormatError(IFMError, ValueError):
    """A serialized stream (checkpoint, dataset, metrics) could not be parsed."""


class ConfigError(IFMError, ValueError):
    """A run configuration failed validation. ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
