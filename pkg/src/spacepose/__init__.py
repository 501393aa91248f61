"""Geometry, loss and evaluation toolkit for monocular spacecraft pose estimation."""

from .errors import SpacePoseError
from .geometry import (
    PRISMA_CAMERA,
    TANGO_KEYPOINTS,
    CameraIntrinsics,
    KeypointSet2D,
    KeypointSet3D,
    Pose,
    project,
    quat_to_rotmat,
    rotation_error,
    slab_esa_score,
    translation_error,
)
from .pnp import refine_gauss_newton, solve_epnp

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "KeypointSet2D",
    "KeypointSet3D",
    "PRISMA_CAMERA",
    "Pose",
    "SpacePoseError",
    "TANGO_KEYPOINTS",
    "project",
    "quat_to_rotmat",
    "refine_gauss_newton",
    "rotation_error",
    "slab_esa_score",
    "solve_epnp",
    "translation_error",
]
