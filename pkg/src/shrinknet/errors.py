"""Exception hierarchy shared across the package.

The CLI maps each class to a distinct exit code, so library code should
raise the most specific one that applies.
"""


class ShrinknetError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ShrinknetError):
    """Invalid configuration, shapes, or arguments."""


class DataError(ShrinknetError):
    """Broken input data: unparseable mesh, bad cache, empty dataset."""


class OffParseError(DataError):
    """OFF mesh file violates the format. Carries the 1-based line number."""

    def __init__(self, path, line_no, message):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class NumericError(ShrinknetError):
    """Non-finite values or a failed gradient check."""
