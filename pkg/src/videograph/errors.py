"""Shared error types for configuration, state, and file parsing."""


class ConfigError(ValueError):
    """A configuration value or combination is invalid."""


class StateError(RuntimeError):
    """An operation was invoked in an invalid state."""


class ParseError(ValueError):
    """A file could not be parsed; carries the failing byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
