"""Exception types shared across the package."""


class CpdmError(Exception):
    """Base class for all package errors."""


class ConfigError(CpdmError, ValueError):
    """Invalid configuration or arguments."""


class ShapeError(CpdmError, ValueError):
    """Tensor shapes or channel counts do not match."""


class RangeError(CpdmError, ValueError):
    """Values outside the admissible range."""


class TrainingError(CpdmError, RuntimeError):
    """Numerical failure during optimisation (non-finite loss or gradients)."""


class FormatError(CpdmError, ValueError):
    """Malformed tensor container; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
