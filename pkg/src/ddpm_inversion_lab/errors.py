"""Exception hierarchy shared by every module of the lab."""


class LabError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(LabError, ValueError):
    """Invalid schedule, denoiser, plan or edit configuration."""


class OrderingError(LabError, ValueError):
    """A transition was requested with a target not strictly below its source."""


class BoundsError(LabError, IndexError):
    """A timestep (possibly after the shift) falls outside the schedule table."""


class ShapeError(LabError, ValueError):
    """State or embedding dimension does not match the denoiser."""


class UnknownConditionError(LabError, KeyError):
    """A condition id is not known to the denoiser."""


class IntegrityError(LabError):
    """A stored record does not match the schedule/denoiser it is replayed with."""


class UndefinedCosineError(LabError, ArithmeticError):
    """Cosine similarity requested for a zero-norm vector."""
