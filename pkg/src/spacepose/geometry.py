"""Reference frames, pose algebra, the pinhole camera, and pose metrics.

Conventions used throughout the package:

* Quaternions are scalar-first ``(w, x, y, z)`` with the Hamilton product.
* A :class:`Pose` ``(q, t)`` maps a point expressed in the target body frame
  B into the camera frame C: ``p_C = R(q) @ p_B + t``.  ``t`` is the position
  of the origin of B measured from the origin of C, expressed in C.
* Pixel coordinates ``(u, v)`` are column/row, ``u = fpx * X / Z + c_x``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import BehindCameraError, DegenerateGeometryError, InvalidInputError

NUM_KEYPOINTS = 11
UNIT_TOL = 1e-6


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Quaternion algebra
# ---------------------------------------------------------------------------


def normalize_quaternion(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (4,):
        raise InvalidInputError(f"quaternion must have 4 components, got shape {q.shape}")
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise InvalidInputError("cannot normalize a zero or non-finite quaternion")
    return q / n


def canonical_quaternion(q) -> np.ndarray:
    """Unit quaternion with a non-negative scalar part (``q`` and ``-q`` agree)."""
    q = normalize_quaternion(q)
    return -q if q[0] < 0 else q


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a ⊗ b``."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a (possibly unnormalized) quaternion.

    ``quat_to_rotmat(q) @ v`` equals the vector part of ``q ⊗ (0, v) ⊗ q*``.
    """
    w, x, y, z = normalize_quaternion(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotmat_to_quat(R) -> np.ndarray:
    """Canonical unit quaternion (``w >= 0``) of a rotation matrix.

    Uses Shepperd's branch selection so the result stays accurate near
    180 degree rotations.
    """
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise InvalidInputError(f"rotation matrix must be 3x3, got {R.shape}")
    tr = np.trace(R)
    diag = np.diag(R)
    i = int(np.argmax(np.concatenate([[tr], diag])))
    if i == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif i == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif i == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return canonical_quaternion(q)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def random_quaternion(rng: np.random.Generator) -> np.ndarray:
    """Uniform sample on SO(3): a normalized 4D standard normal draw."""
    while True:
        q = rng.standard_normal(4)
        n = np.linalg.norm(q)
        if n > 1e-12:
            return q / n


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Pose:
    """Attitude and position of the target body frame relative to the camera."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        if t.shape != (3,):
            raise InvalidInputError(f"translation must have 3 components, got shape {t.shape}")
        object.__setattr__(self, "q", _frozen(normalize_quaternion(self.q)))
        object.__setattr__(self, "t", _frozen(t))

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.q)

    @classmethod
    def from_rotmat(cls, R, t) -> "Pose":
        return cls(rotmat_to_quat(R), t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls([1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0])

    def canonical(self) -> "Pose":
        return Pose(canonical_quaternion(self.q), self.t)

    def transform(self, points) -> np.ndarray:
        """Map body-frame points (n, 3) into the camera frame."""
        return np.asarray(points, dtype=float) @ self.R.T + self.t

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose(quat_multiply(self.q, other.q), self.R @ other.t + self.t)

    def inverse(self) -> "Pose":
        Rt = self.R.T
        return Pose(quat_conjugate(self.q), -Rt @ self.t)

    def to_dict(self) -> dict:
        return {"q": self.q.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(d["q"], d["t"])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera described by physical focal lengths and pixel pitch.

    The principal point defaults to the exact image center ``(n_u/2, n_v/2)``.
    """

    n_u: int
    n_v: int
    f_x: float
    f_y: float
    du: float
    dv: float
    c_x: float | None = None
    c_y: float | None = None

    def __post_init__(self):
        for name in ("n_u", "n_v", "f_x", "f_y", "du", "dv"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise InvalidInputError(f"camera parameter {name} must be positive, got {v}")
        if self.c_x is None:
            object.__setattr__(self, "c_x", self.n_u / 2.0)
        if self.c_y is None:
            object.__setattr__(self, "c_y", self.n_v / 2.0)

    @property
    def fpx(self) -> float:
        return self.f_x / self.du

    @property
    def fpy(self) -> float:
        return self.f_y / self.dv

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fpx, 0.0, self.c_x], [0.0, self.fpy, self.c_y], [0.0, 0.0, 1.0]])

    @property
    def image_size(self) -> tuple[int, int]:
        return (self.n_u, self.n_v)

    def to_dict(self) -> dict:
        return {
            "n_u": self.n_u, "n_v": self.n_v, "f_x": self.f_x, "f_y": self.f_y,
            "du": self.du, "dv": self.dv, "c_x": self.c_x, "c_y": self.c_y,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(**d)


# Vision-based sensor flown on the PRISMA mission.
PRISMA_CAMERA = CameraIntrinsics(n_u=752, n_v=580, f_x=0.0200, f_y=0.0193, du=8.6e-6, dv=8.3e-6)


@dataclass(frozen=True)
class KeypointSet3D:
    """Eleven ordered model points in the body frame (meters).

    Index layout: 0-3 bottom plate corners, 4-7 top plate (solar panel)
    corners, 8-10 antenna tips.
    """

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.shape != (NUM_KEYPOINTS, 3):
            raise InvalidInputError(f"expected ({NUM_KEYPOINTS}, 3) keypoints, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("keypoints must be finite")
        s = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
        if s[2] <= 1e-9 * max(s[0], 1.0):
            raise DegenerateGeometryError("model keypoints are coplanar")
        object.__setattr__(self, "points", _frozen(pts))

    def __len__(self):
        return NUM_KEYPOINTS


@dataclass(frozen=True)
class KeypointSet2D:
    """Eleven ordered image points (pixels) with per-point visibility."""

    points: np.ndarray
    visibility: np.ndarray = field(default=None)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.shape != (NUM_KEYPOINTS, 2):
            raise InvalidInputError(f"expected ({NUM_KEYPOINTS}, 2) keypoints, got {pts.shape}")
        vis = np.ones(NUM_KEYPOINTS, bool) if self.visibility is None else np.asarray(self.visibility, bool)
        if vis.shape != (NUM_KEYPOINTS,):
            raise InvalidInputError(f"visibility must have {NUM_KEYPOINTS} flags, got {vis.shape}")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "visibility", _frozen(vis, bool))

    def __len__(self):
        return NUM_KEYPOINTS

    def check_bounds(self, image_size: tuple[int, int]) -> None:
        """Raise if a visible point falls outside ``[0, n_u) x [0, n_v)``."""
        n_u, n_v = image_size
        p = self.points[self.visibility]
        bad = (p[:, 0] < 0) | (p[:, 0] >= n_u) | (p[:, 1] < 0) | (p[:, 1] >= n_v)
        if np.any(bad):
            idx = np.flatnonzero(self.visibility)[bad]
            raise InvalidInputError(f"visible keypoints {idx.tolist()} lie outside the image")


# Approximate Tango wireframe keypoints; a stand-in model, not survey data.
TANGO_KEYPOINTS = KeypointSet3D(
    np.array(
        [
            [-0.3700, -0.2640, 0.0000],
            [-0.3700, 0.3040, 0.0000],
            [0.3700, 0.3040, 0.0000],
            [0.3700, -0.2640, 0.0000],
            [-0.3700, -0.3850, 0.3215],
            [-0.3700, 0.3850, 0.3215],
            [0.3700, 0.3850, 0.3215],
            [0.3700, -0.3850, 0.3215],
            [-0.5427, 0.4877, 0.2535],
            [0.5427, 0.4877, 0.2591],
            [0.3050, -0.5790, 0.2515],
        ]
    )
)


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


def project_points(camera: CameraIntrinsics, pose: Pose, points) -> np.ndarray:
    """Project body-frame points of shape (n, 3) to pixels, shape (n, 2)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    pc = pose.transform(pts)
    z = pc[:, 2]
    bad = np.flatnonzero(~(z > 0))
    if bad.size:
        raise BehindCameraError(int(bad[0]), float(z[bad[0]]))
    u = camera.fpx * pc[:, 0] / z + camera.c_x
    v = camera.fpy * pc[:, 1] / z + camera.c_y
    return np.column_stack([u, v])


def project(camera: CameraIntrinsics, pose: Pose, pts: KeypointSet3D) -> KeypointSet2D:
    return KeypointSet2D(project_points(camera, pose, pts.points))


def backproject(camera: CameraIntrinsics, uv) -> np.ndarray:
    """Unit-depth camera-frame rays ``(x, y, 1)`` for pixels of shape (n, 2)."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    x = (uv[:, 0] - camera.c_x) / camera.fpx
    y = (uv[:, 1] - camera.c_y) / camera.fpy
    return np.column_stack([x, y, np.ones(len(uv))])


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def translation_error(t_pred, t_true) -> np.ndarray:
    """Componentwise absolute translation error (meters)."""
    return np.abs(np.asarray(t_pred, dtype=float) - np.asarray(t_true, dtype=float))


def _check_unit(q, name: str) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (4,):
        raise InvalidInputError(f"{name} must have 4 components, got shape {q.shape}")
    n = np.linalg.norm(q)
    if not abs(n - 1.0) <= UNIT_TOL:
        raise InvalidInputError(f"{name} is not a unit quaternion (norm {n:.9g})")
    return q


def rotation_error(q_pred, q_true) -> float:
    """Angle (radians, in [0, pi]) between two attitudes given as unit quaternions."""
    a = _check_unit(q_pred, "q_pred")
    b = _check_unit(q_true, "q_true")
    d = np.clip(abs(float(np.dot(a, b))), -1.0, 1.0)
    return 2.0 * float(np.arccos(d))


def pose_score(pose_pred: Pose, pose_true: Pose) -> float:
    """Per-sample SLAB/ESA score: relative translation error plus rotation error."""
    tn = np.linalg.norm(pose_true.t)
    if tn == 0:
        raise InvalidInputError("ground-truth translation has zero norm")
    return float(np.linalg.norm(pose_pred.t - pose_true.t) / tn) + rotation_error(pose_pred.q, pose_true.q)


def slab_esa_score(samples: Iterable[Sequence[Pose]]) -> float:
    """Mean per-sample pose score over ``(pose_pred, pose_true)`` pairs."""
    scores = [pose_score(p, t) for p, t in samples]
    if not scores:
        raise InvalidInputError("slab_esa_score needs at least one sample")
    return float(np.mean(scores))
