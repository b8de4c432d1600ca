"""Exception types shared across the package."""


class G2sfError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(G2sfError, ValueError):
    """Operands have incompatible dimensions."""


class ConfigError(G2sfError, ValueError):
    """A configuration value is invalid or inconsistent."""


class FormatError(G2sfError, ValueError):
    """An on-disk artifact is malformed.

    ``offset`` is the byte offset of the first offending byte when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class EmptyBankError(G2sfError, ValueError):
    """A memory bank was built from, or queried with, no usable vectors."""


class DivergenceError(G2sfError, RuntimeError):
    """Training produced a non-finite quantity.

    ``checkpoint`` holds the last finite model state when one exists.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class UndefinedMetricError(G2sfError, ValueError):
    """A metric is mathematically undefined for the given inputs."""


class StaleArtifactError(G2sfError, RuntimeError):
    """A pipeline stage would consume an out-of-date upstream artifact."""
