"""Exception types shared across the package."""

from __future__ import annotations


class MetapacError(Exception):
    """Base class for every error raised by metapac."""


class DomainError(MetapacError, ValueError):
    """An argument lies outside the domain where a formula or lemma holds."""


class FormatError(MetapacError, ValueError):
    """A file does not follow the expected binary or container layout.

    ``offset`` is the byte position where parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(MetapacError, ArithmeticError):
    """Training produced a non-finite objective."""

    def __init__(self, message: str, epoch: int | None = None):
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)
        self.epoch = epoch


class ConfigError(MetapacError, ValueError):
    """A configuration document is missing a field or has a bad value.

    ``path`` is the dotted location of the offending field.
    """

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
