"""Exception hierarchy shared by every module."""


class EConvNeXtError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(EConvNeXtError, ValueError):
    """Inconsistent layer or architecture configuration."""


class ShapeError(EConvNeXtError, ValueError):
    """Tensor dimensions do not fit the operation."""


class DegenerateStatisticsError(EConvNeXtError, ValueError):
    """Batch statistics requested over a single element."""


class TrainingError(EConvNeXtError, RuntimeError):
    """Training diverged (non-finite loss)."""
