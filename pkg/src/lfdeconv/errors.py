"""Exception hierarchy shared by the library and the command line."""


class LfDeconvError(Exception):
    """Base class for all errors raised by lfdeconv."""


class ValidationError(LfDeconvError, ValueError):
    """An input violates a documented invariant."""


class DimensionError(ValidationError):
    """Array shapes are inconsistent with each other."""


class FormatError(ValidationError):
    """A file on disk does not match the expected layout."""


class MemoryBudgetError(LfDeconvError):
    """A worker plan would exceed the configured memory budget."""

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class WorkerError(LfDeconvError, RuntimeError):
    """A pipeline worker failed; the whole run is abandoned."""


class ConfigError(ValidationError):
    """A run configuration file or flag is invalid."""


class OutputError(LfDeconvError, OSError):
    """An output file could not be written."""
