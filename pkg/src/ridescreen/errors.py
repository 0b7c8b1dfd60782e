"""Exception hierarchy and CLI exit codes."""


class RidescreenError(Exception):
    """Base class for all package errors."""


class ConfigError(RidescreenError):
    """Invalid configuration value, file, or model/file layout."""


class DataError(RidescreenError):
    """Input data cannot support the requested operation."""


class MissingData(DataError):
    """Required observations are absent (empty day set, masked stack, ...)."""


class ShapeError(DataError):
    """Array dimensions do not match the expected layout."""


class OutOfBounds(DataError):
    """A point lies outside the configured grid bounds."""


class DegenerateLabels(DataError):
    """A training set contains only one class."""


class TrainingDiverged(DataError):
    """Optimization produced a non-finite loss."""


class CotrainStalled(UserWarning):
    """Co-training hit its iteration cap while still adding labels."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
