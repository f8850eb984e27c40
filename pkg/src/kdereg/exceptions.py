"""Exception types shared across the package."""

from __future__ import annotations


class InputError(ValueError):
    """Malformed or inconsistent input data."""


class FormatError(InputError):
    """A file could not be parsed.

    Carries the offending path and the byte offset where parsing failed so
    the CLI can point at the exact location.
    """

    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = int(offset)
        self.message = message
        super().__init__(f"{self.path}: byte {self.offset}: {message}")


class DegenerateError(ValueError):
    """The numerical problem has no unique solution for the given data."""
