"""Exception hierarchy shared by every module."""


class SpacePoseError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(SpacePoseError, ValueError):
    pass


class ConfigurationError(SpacePoseError, ValueError):
    pass


class ShapeError(SpacePoseError, ValueError):
    pass


class BehindCameraError(SpacePoseError, ValueError):
    """A point has non-positive depth in the camera frame."""

    def __init__(self, index: int, depth: float):
        self.index = index
        self.depth = depth
        super().__init__(f"point {index} is behind the camera (depth {depth:.6g} m)")


class UnobservablePointError(SpacePoseError, ValueError):
    """A keypoint is seen in too few images for its depth to be observable."""

    def __init__(self, index: int, n_views: int):
        self.index = index
        self.n_views = n_views
        super().__init__(
            f"keypoint {index} is observed in {n_views} image(s); at least 2 are required"
        )


class DegenerateGeometryError(SpacePoseError, ValueError):
    pass


class InsufficientCorrespondencesError(SpacePoseError, ValueError):
    pass


class NoValidPoseError(SpacePoseError, ValueError):
    pass


class InvalidCovarianceError(SpacePoseError, ValueError):
    pass
