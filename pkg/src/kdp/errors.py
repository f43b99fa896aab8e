"""Exception hierarchy shared across the package."""


class KDPError(Exception):
    """Base class for all package errors."""


class ShapeError(KDPError, ValueError):
    pass


class SpecError(KDPError, ValueError):
    """A condition specification does not fit the window shape."""


class StateError(KDPError, RuntimeError):
    """An object was used in a state it does not support (e.g. stale tape)."""


class ConfigError(KDPError, ValueError):
    pass


class TrainingError(KDPError, RuntimeError):
    """Numerical abort during training. ``diagnostics`` carries the context."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class FormatError(KDPError, IOError):
    """Base class for binary file format failures."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass
