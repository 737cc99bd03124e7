"""Exception hierarchy shared by every subpackage."""


class PylonError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(PylonError, ValueError):
    """Tensor shapes do not line up for the requested operation."""


class ConfigurationError(PylonError, ValueError):
    """An operation or model was configured with invalid settings."""


class DegenerateStatisticsError(PylonError, ValueError):
    """Normalization statistics cannot be estimated from the given input."""


class InputError(PylonError, ValueError):
    """Invalid user-supplied values (labels, shifts, ...)."""


class OptimizerError(PylonError, FloatingPointError):
    """Optimizer received unusable gradients."""


class OracleError(PylonError, FloatingPointError):
    """A numerical oracle evaluated to a non-finite value."""


class NumericalError(PylonError, FloatingPointError):
    """Training produced a non-finite loss."""


class IngestionError(PylonError, OSError):
    """An image or annotation file could not be read."""


class UndefinedMetricError(PylonError, ValueError):
    """A metric is undefined for the given inputs."""


class MissingAnnotationError(PylonError):
    """Evaluation was asked to score localization on data without bounding boxes."""
