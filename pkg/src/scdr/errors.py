"""Exception hierarchy shared by the engine, the framework and the CLI."""


class ScdrError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(ScdrError, ValueError):
    """An operand has the wrong shape or an empty extent."""


class NumericError(ScdrError, ArithmeticError):
    """Non-finite values or a numerically degenerate input."""


class DegenerateVectorError(NumericError):
    """A vector with zero norm was asked to be normalized."""


class GraphStateError(ScdrError, RuntimeError):
    """Backward/optimizer called on a graph in the wrong state."""


class ConfigError(ScdrError):
    """Invalid or inconsistent configuration."""


class DataError(ScdrError):
    """Dataset missing, malformed, or unable to satisfy a request."""


class AugmentationError(DataError):
    pass


class BatchError(DataError):
    pass


class CheckpointError(ScdrError):
    pass
