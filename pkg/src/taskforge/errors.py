"""Exception hierarchy shared by all taskforge modules."""


class TaskforgeError(Exception):
    """Base class for all errors raised by this package."""


class IngestError(TaskforgeError):
    """A referenced dataset file is missing or unreadable."""


class ValidationError(TaskforgeError):
    """Loaded data violates a declared contract (dimensions, class ids, ...)."""


class FixtureError(TaskforgeError):
    """Synthetic fixture generation could not satisfy its constraints."""


class ParameterError(TaskforgeError):
    """An operator was configured with out-of-contract parameters."""


class DimensionError(TaskforgeError):
    """An operation received rasters of incompatible or unsupported shape."""


class PaletteError(TaskforgeError):
    """A palette is missing classes or cannot be sampled under its constraints."""


class SamplerError(TaskforgeError):
    """Sequence sampling could not produce a valid structure or bundle."""


class TrainingError(TaskforgeError):
    """Codebook training received insufficient or inconsistent data."""


class CodecError(TaskforgeError):
    """encode/decode was called with incompatible images or token streams."""


class MetricError(TaskforgeError):
    """A metric was computed on mismatched or wrongly-typed operands."""


class EvaluationError(TaskforgeError):
    """Chain evaluation received structurally incompatible inputs."""


class ConfigError(TaskforgeError):
    """A run configuration field is out of its documented range."""
