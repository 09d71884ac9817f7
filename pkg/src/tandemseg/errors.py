"""Exception types shared across the package."""


class TandemsegError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(TandemsegError):
    """A configuration value is out of range or internally inconsistent."""


class DimensionError(TandemsegError):
    """Array shapes do not line up for the requested operation."""


class ValidationError(TandemsegError):
    """Data values violate a documented contract (e.g. labels outside {0,1,2})."""


class FormatError(TandemsegError):
    """A binary file failed to parse; the message names the byte offset."""


class CheckpointMismatchError(TandemsegError):
    """Checkpoint contents do not match the model being loaded into."""


class UsageError(TandemsegError):
    """An API or CLI entry point was called in an unsupported way."""


class EngineError(TandemsegError):
    """Numerical failure inside the tensor engine (non-finite values)."""
