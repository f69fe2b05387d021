"""Exception types raised across the package."""


class MVFuseError(Exception):
    pass


class ShapeMismatch(MVFuseError, ValueError):
    pass


class EmptyCloud(MVFuseError, ValueError):
    pass


class BehindCamera(MVFuseError, ValueError):
    pass


class NonWatertight(MVFuseError, ValueError):
    pass


class CameraInsideGrid(MVFuseError, ValueError):
    pass


class DegenerateRow(MVFuseError, ValueError):
    pass


class TimeAtOne(MVFuseError, ValueError):
    pass


class NoViews(MVFuseError, ValueError):
    pass


class LatticeMismatch(MVFuseError, ValueError):
    pass


class EmptyReference(MVFuseError, ValueError):
    pass


class NonFinite(MVFuseError, FloatingPointError):
    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


class SpecInvalid(MVFuseError, ValueError):
    pass


class CorrespondenceMissing(MVFuseError, ValueError):
    pass
