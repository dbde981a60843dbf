"""Exception types shared across the package.

Each leaf class corresponds to one CLI exit code (see ``cli.EXIT_CODES``);
library code raises these directly and the command layer translates.
"""


class BrainrepError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(BrainrepError):
    """Invalid configuration value or combination of values."""


class DataError(BrainrepError):
    """Unreadable, malformed, or inconsistent input data."""


class CheckpointFormatError(DataError):
    """Checkpoint bytes do not match the documented layout or version."""


class DegenerateLabelsError(DataError):
    """A classifier training set contains only one class."""


class ShapeError(BrainrepError):
    """Tensor shape or dimension mismatch."""


class DivergenceError(BrainrepError):
    """Training produced a non-finite loss or non-finite weights."""


class MetricUndefinedError(BrainrepError):
    """Requested metric is undefined for the given inputs."""
