"""Exception hierarchy shared by every grain_ad module."""


class GrainADError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(GrainADError, ValueError):
    pass


class DataError(GrainADError):
    """Unreadable, missing or inconsistent dataset input."""


class ConfigError(GrainADError, ValueError):
    pass


class ModelLoadError(GrainADError):
    """Weight or model file that is missing, corrupt or shape-mismatched."""


class TrainingDivergenceError(GrainADError, FloatingPointError):
    """Raised when the training loss stops being finite.

    The offending step index and loss are kept on the instance so callers
    can log them before bailing out.
    """

    def __init__(self, message, step=None, loss=None):
        super().__init__(message)
        self.step = step
        self.loss = loss


class UndefinedMetricError(GrainADError, ValueError):
    pass
