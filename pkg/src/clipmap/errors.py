"""Exception hierarchy shared by every clipmap module."""


class ClipMapError(Exception):
    """Base class for all library errors."""


class DimensionError(ClipMapError, ValueError):
    """Operand shapes are not conformable."""


class ContractError(ClipMapError, ValueError):
    """A documented precondition was violated by the caller."""


class InputError(ClipMapError, ValueError):
    """Malformed model input (token ids, image batches, indices)."""


class NumericError(ClipMapError, FloatingPointError):
    """A NaN or Inf appeared during training."""

    def __init__(self, message: str, step: int | None = None, param: str | None = None):
        super().__init__(message)
        self.step = step
        self.param = param


class ConfigError(ClipMapError, ValueError):
    """Invalid run configuration (unknown key, bad value, dimension mismatch)."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class CheckpointError(ClipMapError, IOError):
    """Checkpoint container is unreadable, truncated or fails its CRC."""
