"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value or combination of values is invalid."""


class ShapeError(ValueError):
    """A tensor shape is incompatible with the requested operation."""


class ManifestError(ValueError):
    """A dataset directory violates the expected layout."""


class WeightsUnavailable(RuntimeError):
    """Pretrained weights were requested but cannot be loaded."""


class UndefinedMetric(ValueError):
    """The metric is undefined for the given inputs (e.g. a single class)."""


class TrainingDiverged(RuntimeError):
    """The training loss became non-finite."""
