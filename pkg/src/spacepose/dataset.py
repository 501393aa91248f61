"""Synthetic label generation and the JSON-lines label/pose file formats.

A labels file starts with one header object::

    {"schema": "spacepose/labels", "version": 1, "camera_id": ..., "camera": {...}, "model": [[x, y, z], ...]}

followed by one sample per line::

    {"id": "000000", "q": [4], "t": [3], "keypoints": [[u, v]] * 11, "visible": [11],
     "bbox": [x, y, w, h], "source": "synthetic", "camera_id": "prisma", "image": null}

Pose files (written by ``run`` and ``pnp``, read by ``evaluate``) use the
header ``{"schema": "spacepose/poses", "version": 1}`` and per-sample lines
``{"id", "status": "ok" | "failed", "q", "t", "bbox", "error"}``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .detect import BoundingBox
from .errors import BehindCameraError, InvalidInputError
from .geometry import (
    PRISMA_CAMERA,
    TANGO_KEYPOINTS,
    CameraIntrinsics,
    KeypointSet2D,
    KeypointSet3D,
    Pose,
    backproject,
    project,
    random_quaternion,
)
from .stylemix import SYNTHETIC, TEXTURE_RANDOMIZED

log = logging.getLogger(__name__)

LABELS_SCHEMA = "spacepose/labels"
POSES_SCHEMA = "spacepose/poses"
SCHEMA_VERSION = 1
SOURCES = (SYNTHETIC, TEXTURE_RANDOMIZED)


@dataclass(frozen=True)
class DatasetSample:
    sample_id: str
    pose: Pose
    keypoints: KeypointSet2D
    bbox: BoundingBox
    source: str = SYNTHETIC
    camera_id: str = "prisma"
    image: str | None = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise InvalidInputError(f"unknown sample source {self.source!r}")

    def to_dict(self) -> dict:
        return {
            "id": self.sample_id,
            "q": self.pose.q.tolist(),
            "t": self.pose.t.tolist(),
            "keypoints": self.keypoints.points.tolist(),
            "visible": self.keypoints.visibility.tolist(),
            "bbox": self.bbox.to_list(),
            "source": self.source,
            "camera_id": self.camera_id,
            "image": self.image,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSample":
        try:
            return cls(
                sample_id=str(d["id"]),
                pose=Pose(d["q"], d["t"]),
                keypoints=KeypointSet2D(d["keypoints"], d.get("visible")),
                bbox=BoundingBox(*d["bbox"]),
                source=d.get("source", SYNTHETIC),
                camera_id=d.get("camera_id", "prisma"),
                image=d.get("image"),
            )
        except (KeyError, TypeError) as e:
            raise InvalidInputError(f"malformed label record: {e!r}") from e


def sample_from_pose(sample_id: str, camera: CameraIntrinsics, model: KeypointSet3D, pose: Pose, **kw) -> DatasetSample:
    """Label a pose: projected keypoints and their min/max envelope."""
    kp = project(camera, pose, model)
    return DatasetSample(sample_id, pose, kp, BoundingBox.from_points(kp.points), **kw)


@dataclass(frozen=True)
class PoseDistribution:
    """Range uniform in ``[range_min, range_max]`` meters, attitude uniform on SO(3).

    The body origin projects to a pixel drawn uniformly from the central
    ``center_fraction`` of the image in each axis.
    """

    range_min: float = 3.0
    range_max: float = 30.0
    center_fraction: float = 0.8
    require_in_image: bool = False

    def __post_init__(self):
        if not 0 < self.range_min <= self.range_max:
            raise InvalidInputError(f"invalid range interval [{self.range_min}, {self.range_max}]")
        if not 0 <= self.center_fraction <= 1:
            raise InvalidInputError("center_fraction must lie in [0, 1]")


def sample_pose(rng: np.random.Generator, camera: CameraIntrinsics, dist: PoseDistribution = PoseDistribution()) -> Pose:
    q = random_quaternion(rng)
    r = rng.uniform(dist.range_min, dist.range_max)
    f = dist.center_fraction
    uv = np.array([
        camera.n_u * rng.uniform(0.5 - f / 2, 0.5 + f / 2),
        camera.n_v * rng.uniform(0.5 - f / 2, 0.5 + f / 2),
    ])
    ray = backproject(camera, uv)[0]
    return Pose(q, ray / np.linalg.norm(ray) * r)


def generate_samples(
    n: int,
    camera: CameraIntrinsics = PRISMA_CAMERA,
    model: KeypointSet3D = TANGO_KEYPOINTS,
    dist: PoseDistribution = PoseDistribution(),
    seed: int = 0,
    camera_id: str = "prisma",
) -> list[DatasetSample]:
    """``n`` labelled samples, deterministic in ``seed``.

    Poses that put a keypoint behind the camera (or, with
    ``require_in_image``, outside the image) are redrawn.
    """
    if n < 1:
        raise InvalidInputError("n must be at least 1")
    rng = np.random.default_rng(seed)
    out = []
    resampled = 0
    for i in range(n):
        while True:
            pose = sample_pose(rng, camera, dist)
            try:
                s = sample_from_pose(f"{i:06d}", camera, model, pose, camera_id=camera_id)
            except BehindCameraError:
                resampled += 1
                continue
            if dist.require_in_image:
                p = s.keypoints.points
                if np.any(p < 0) or np.any(p[:, 0] >= camera.n_u) or np.any(p[:, 1] >= camera.n_v):
                    resampled += 1
                    continue
            out.append(s)
            break
    if resampled:
        log.info("resampled %d poses while generating %d samples", resampled, n)
    return out


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


def write_labels(path: str | Path, samples: Iterable[DatasetSample], camera: CameraIntrinsics = PRISMA_CAMERA,
                 model: KeypointSet3D = TANGO_KEYPOINTS, camera_id: str = "prisma") -> None:
    header = {
        "schema": LABELS_SCHEMA,
        "version": SCHEMA_VERSION,
        "camera_id": camera_id,
        "camera": camera.to_dict(),
        "model": model.points.tolist(),
    }
    with open(path, "w") as f:
        f.write(_dumps(header) + "\n")
        for s in samples:
            f.write(_dumps(s.to_dict()) + "\n")


def _read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise InvalidInputError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e


@dataclass
class LabelFile:
    camera: CameraIntrinsics
    model: KeypointSet3D
    samples: list[DatasetSample] = field(default_factory=list)
    camera_id: str = "prisma"


def read_labels(path: str | Path) -> LabelFile:
    records = _read_jsonl(path)
    header = next(records, None)
    if not header or header.get("schema") != LABELS_SCHEMA:
        raise InvalidInputError(f"{path}: missing {LABELS_SCHEMA!r} header line")
    if header.get("version") != SCHEMA_VERSION:
        raise InvalidInputError(f"{path}: unsupported labels version {header.get('version')}")
    out = LabelFile(
        CameraIntrinsics.from_dict(header["camera"]),
        KeypointSet3D(header["model"]),
        camera_id=header.get("camera_id", "prisma"),
    )
    out.samples = [DatasetSample.from_dict(r) for r in records]
    return out


@dataclass(frozen=True)
class PoseRecord:
    sample_id: str
    status: str
    pose: Pose | None = None
    bbox: BoundingBox | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        d = {"id": self.sample_id, "status": self.status}
        if self.pose is not None:
            d.update(self.pose.to_dict())
        if self.bbox is not None:
            d["bbox"] = self.bbox.to_list()
        if self.error is not None:
            d["error"] = self.error
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PoseRecord":
        try:
            status = d.get("status", "ok")
            pose = Pose(d["q"], d["t"]) if status == "ok" else None
            bbox = BoundingBox(*d["bbox"]) if d.get("bbox") is not None else None
            return cls(str(d["id"]), status, pose, bbox, d.get("error"))
        except (KeyError, TypeError) as e:
            raise InvalidInputError(f"malformed pose record: {e!r}") from e


def write_poses(path: str | Path, records: Iterable[PoseRecord]) -> None:
    with open(path, "w") as f:
        f.write(_dumps({"schema": POSES_SCHEMA, "version": SCHEMA_VERSION}) + "\n")
        for r in records:
            f.write(_dumps(r.to_dict()) + "\n")


def read_poses(path: str | Path) -> list[PoseRecord]:
    out = []
    for d in _read_jsonl(path):
        if "schema" in d:
            if d["schema"] != POSES_SCHEMA:
                raise InvalidInputError(f"{path}: expected {POSES_SCHEMA!r}, found {d['schema']!r}")
            continue
        out.append(PoseRecord.from_dict(d))
    return out


def read_records(path: str | Path) -> dict[str, dict]:
    """Id-keyed records of a JSON-lines file, skipping any header line."""
    out = {}
    for d in _read_jsonl(path):
        if "schema" in d:
            continue
        if "id" not in d:
            raise InvalidInputError(f"{path}: record without an 'id'")
        out[str(d["id"])] = d
    return out


# ---------------------------------------------------------------------------
# Placeholder imagery
# ---------------------------------------------------------------------------

WIREFRAME_EDGES = (
    (0, 1), (1, 2), (2, 3), (3, 0),
    (4, 5), (5, 6), (6, 7), (7, 4),
    (0, 4), (1, 5), (2, 6), (3, 7),
)


def render_wireframe(camera: CameraIntrinsics, sample: DatasetSample, model: KeypointSet3D = TANGO_KEYPOINTS):
    """Grayscale wireframe splat of a sample and its foreground bitmask.

    Returns ``(image, mask)`` as ``uint8`` arrays of shape ``(n_v, n_u)``;
    the mask is 1 inside the convex hull of the projected keypoints.
    """
    from PIL import Image, ImageDraw

    pts = sample.keypoints.points
    img = Image.new("L", (camera.n_u, camera.n_v), 0)
    msk = Image.new("L", (camera.n_u, camera.n_v), 0)
    draw = ImageDraw.Draw(img)
    hull = _convex_hull(pts)
    ImageDraw.Draw(msk).polygon([tuple(p) for p in hull], fill=1)
    draw.polygon([tuple(p) for p in hull], fill=70)
    for a, b in WIREFRAME_EDGES:
        draw.line([tuple(pts[a]), tuple(pts[b])], fill=200, width=2)
    for tip in (8, 9, 10):
        base = int(np.argmin(np.linalg.norm(model.points[:8] - model.points[tip], axis=1)))
        draw.line([tuple(pts[tip]), tuple(pts[base])], fill=230, width=1)
    for p in pts:
        draw.ellipse([p[0] - 2, p[1] - 2, p[0] + 2, p[1] + 2], fill=255)
    return np.asarray(img, dtype=np.uint8), np.asarray(msk, dtype=np.uint8)



def _convex_hull(points) -> np.ndarray:
    from scipy.spatial import ConvexHull

    pts = np.asarray(points, dtype=float)
    return pts[ConvexHull(pts).vertices]
