"""Exception types shared across the package."""


class SlideFocusError(Exception):
    """Base class for all package errors."""


class ParameterError(SlideFocusError, ValueError):
    """An argument is outside its documented domain."""


class RegionError(SlideFocusError, ValueError):
    """A requested region falls outside the slide or frame bounds."""


class ConfigurationError(SlideFocusError, ValueError):
    """A run configuration is inconsistent or unusable."""


class ShapeError(SlideFocusError, ValueError):
    """A tensor or image has an incompatible shape."""


class SpectrumUndefinedError(SlideFocusError, ValueError):
    """The power spectrum carries no usable non-DC energy."""


class MetricError(SlideFocusError, ValueError):
    """A metric is requested on an empty or degenerate record set."""


class DirectionUndefinedError(MetricError):
    """No record lies far enough from the focal plane to define a direction."""


class AggregationError(SlideFocusError, ValueError):
    """Prediction aggregation received an empty input."""


class WeightLoadError(SlideFocusError, RuntimeError):
    """A weight file is corrupt, truncated, or incompatible."""


class TrainingDivergedError(SlideFocusError, RuntimeError):
    """Training hit a non-finite loss; carries the last usable checkpoint."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
