"""Exception types shared across modules."""

from .engine.tensor import ShapeError


class SpecError(ValueError):
    """A network or training configuration violates its invariants."""


class FormatError(ValueError):
    """Base for on-disk dataset/checkpoint problems.  ``path`` names the file."""

    def __init__(self, message: str, path=None):
        super().__init__(f"{path}: {message}" if path is not None else message)
        self.path = path


class MalformedHeaderError(FormatError):
    pass


class TruncatedDataError(FormatError):
    pass


class DimensionMismatchError(FormatError):
    pass


class GateCountMismatchError(FormatError):
    pass


class UndefinedMetricError(ValueError):
    """A metric's denominator is zero for the given inputs."""


class SurfaceDistanceError(UndefinedMetricError):
    def __init__(self, message: str = "undefined surface distance: empty surface"):
        super().__init__(message)


class NoCavityError(ValueError):
    def __init__(self, message: str = "no cavity detected: every gate volume is zero"):
        super().__init__(message)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, detail: str = "loss is not finite"):
        super().__init__(f"{detail} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


__all__ = [
    "DimensionMismatchError", "FormatError", "GateCountMismatchError", "MalformedHeaderError",
    "NoCavityError", "ShapeError", "SpecError", "SurfaceDistanceError", "TrainingDivergedError",
    "TruncatedDataError", "UndefinedMetricError",
]
