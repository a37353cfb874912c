"""Exception hierarchy shared across the package."""


class DasecountError(Exception):
    """Base class for all package errors."""

    category = "error"


class ValidationError(DasecountError):
    """Input data or metadata violates a documented contract."""

    category = "validation"


class ConfigError(DasecountError):
    """A configuration value or file is invalid."""

    category = "config"


class FormatError(DasecountError):
    """A binary container has the wrong magic or layout."""

    category = "format"


class CorruptionError(DasecountError):
    """A container's payload is inconsistent with its header."""

    category = "corruption"


class ShapeError(DasecountError):
    """A tensor has dimensions a model or pipeline cannot accept."""

    category = "shape"


class TrainingError(DasecountError):
    """Training preconditions not met (e.g. single-class data)."""

    category = "training"


class DivergenceError(TrainingError):
    """Loss became non-finite during optimization."""

    category = "divergence"


class IoError(DasecountError):
    """Filesystem-level failure while reading or writing artifacts."""

    category = "io"
