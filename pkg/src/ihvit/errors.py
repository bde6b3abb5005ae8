"""Shared exception types with stable CLI exit-code semantics."""


class ConfigError(Exception):
    """Invalid configuration or usage (CLI exit code 2)."""


class InputError(Exception):
    """Well-formed request over invalid data (CLI exit code 2)."""


class FormatError(Exception):
    """Malformed file content (CLI exit code 3)."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
