"""Exception hierarchy shared by every module."""


class Lane3DError(Exception):
    """Base class for all package errors."""


# geometry
class HorizonError(Lane3DError):
    """A pixel ray never meets the ground plane (pixel at or above the horizon)."""


class SingularCamera(Lane3DError):
    """The intrinsic matrix is not invertible."""


class BehindCamera(Lane3DError):
    """A 3D point has non-positive depth in the camera frame."""


# lanes / anchors
class DegenerateLane(Lane3DError):
    """A lane has too few points, or is not a function of y where one is required."""


class NoAnchorAvailable(Lane3DError):
    """More ground-truth lanes than anchors."""


# attention core
class ShapeMismatch(Lane3DError, ValueError):
    pass


class MissingGrid(Lane3DError):
    pass


class NonDifferentiablePoint(Lane3DError):
    """A bilinear sample sits on (or within the finite-difference step of) a cell boundary."""


# GT pipeline
class InsufficientSupport(Lane3DError):
    """No LiDAR support near a 2D annotation point."""


class PoseMissing(Lane3DError):
    pass


class StillMultivalued(Lane3DError):
    """Point set is not a function of y even after rotation."""


# evaluation
class FrameMismatch(Lane3DError):
    pass


# io
class ParseError(Lane3DError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class ValidationError(Lane3DError, ValueError):
    pass


class ChecksumMismatch(Lane3DError):
    pass
