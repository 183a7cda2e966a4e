"""Shared exception types."""


class StratLabError(Exception):
    """Base class for all library errors."""


class InvalidInputError(StratLabError, ValueError):
    """Caller supplied malformed data (dimension mismatch, non-finite values, ...)."""


class InvalidConfigError(StratLabError, ValueError):
    """Configuration is inconsistent with the requested operation."""


class NumericalError(StratLabError, ArithmeticError):
    """A computation produced non-finite values and was aborted."""


class EmptyBufferError(StratLabError, RuntimeError):
    """Sampling was requested from buffers that hold no data."""


class CheckpointError(StratLabError, RuntimeError):
    """Checkpoint file is malformed, corrupt, or incompatible."""
