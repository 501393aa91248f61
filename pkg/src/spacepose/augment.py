"""Label-consistent augmentation for grayscale 8-bit images.

Keypoints use the pixel-center convention: ``(u, v)`` is the center of
column ``u`` and row ``v``, so a horizontal flip maps ``u -> (W - 1) - u``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .detect import BoundingBox
from .errors import ConfigurationError, InvalidInputError
from .geometry import KeypointSet2D

GEOMETRIC_OPS = ("hflip", "vflip", "rot90", "rot180", "rot270")
_INVERSE = {"hflip": "hflip", "vflip": "vflip", "rot90": "rot270", "rot180": "rot180", "rot270": "rot90"}

TEST_ENLARGE_PCT = 20.0


@dataclass(frozen=True)
class AugmentConfig:
    """Sampling distributions for training-time augmentation.

    ``gaussian_noise`` is the variance of the additive pixel noise, written
    ``N(0, variance)``; texture-randomization runs use 10 instead of 25.
    """

    brightness: tuple[float, float] = (-25.0, 25.0)
    contrast: tuple[float, float] = (0.5, 2.0)
    gaussian_noise: float = 25.0
    roi_enlargement_factor: tuple[float, float] = (0.0, 50.0)
    roi_shifting_factor: tuple[float, float] = (-10.0, 10.0)
    photometric_prob: float = 0.5
    flip_rotate_prob: float = 0.5
    erase_prob: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.33)
    erase_aspect: tuple[float, float] = (0.3, 3.3)
    seed: int = 0

    def __post_init__(self):
        for name in ("photometric_prob", "flip_rotate_prob", "erase_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {p}")
        if self.roi_enlargement_factor[0] < 0:
            raise ConfigurationError("RoI enlargement must be non-negative")
        if self.gaussian_noise < 0:
            raise ConfigurationError("noise variance must be non-negative")
        lo, hi = self.erase_area
        if not 0 < lo <= hi <= 1:
            raise ConfigurationError(f"erase_area must satisfy 0 < lo <= hi <= 1, got {self.erase_area}")
        if not 0 < self.erase_aspect[0] <= self.erase_aspect[1]:
            raise ConfigurationError(f"invalid erase_aspect {self.erase_aspect}")

    @property
    def noise_std(self) -> float:
        return math.sqrt(self.gaussian_noise)

    @classmethod
    def texture_randomized(cls, **kw) -> "AugmentConfig":
        return cls(gaussian_noise=10.0, **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown augmentation keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    @classmethod
    def from_file(cls, path: str | Path) -> "AugmentConfig":
        path = Path(path)
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            data = tomllib.loads(path.read_text())
        else:
            data = json.loads(path.read_text())
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_image(image) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise InvalidInputError(f"expected a 2D uint8 image, got {img.dtype} {img.shape}")
    return img


# ---------------------------------------------------------------------------
# Photometric
# ---------------------------------------------------------------------------


def photometric(image, alpha: float, beta: float, noise_std: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """``clamp(alpha * p + beta + n, 0, 255)`` rounded half away from zero."""
    img = _check_image(image)
    out = alpha * img.astype(float) + beta
    if noise_std > 0:
        if rng is None:
            raise InvalidInputError("an rng is required when noise_std > 0")
        out = out + rng.normal(0.0, noise_std, size=img.shape)
    out = np.sign(out) * np.floor(np.abs(out) + 0.5)
    return np.clip(out, 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class PhotometricParams:
    alpha: float = 1.0
    beta: float = 0.0
    noise_std: float = 0.0


def sample_photometric(config: AugmentConfig, rng: np.random.Generator) -> PhotometricParams:
    """Each of brightness, contrast and noise is switched on independently with ``photometric_prob``."""
    beta = rng.uniform(*config.brightness) if rng.random() < config.photometric_prob else 0.0
    alpha = rng.uniform(*config.contrast) if rng.random() < config.photometric_prob else 1.0
    noise = config.noise_std if rng.random() < config.photometric_prob else 0.0
    return PhotometricParams(alpha, beta, noise)


# ---------------------------------------------------------------------------
# Flips and rotations
# ---------------------------------------------------------------------------


def inverse_op(op: str) -> str:
    return _INVERSE[op]


def transformed_size(op: str, image_size: tuple[int, int]) -> tuple[int, int]:
    W, H = image_size
    return (H, W) if op in ("rot90", "rot270") else (W, H)


def transform_points(points, op: str, image_size: tuple[int, int]) -> np.ndarray:
    """Map (n, 2) pixel coordinates through ``op`` on an image of size ``(W, H)``.

    Rotations are counter-clockwise as displayed (``numpy.rot90`` semantics).
    """
    if op not in _INVERSE:
        raise InvalidInputError(f"unknown geometric op {op!r}")
    p = np.asarray(points, dtype=float)
    u, v = p[:, 0], p[:, 1]
    W, H = image_size
    if op == "hflip":
        out = (W - 1 - u, v)
    elif op == "vflip":
        out = (u, H - 1 - v)
    elif op == "rot90":
        out = (v, W - 1 - u)
    elif op == "rot180":
        out = (W - 1 - u, H - 1 - v)
    else:
        out = (H - 1 - v, u)
    return np.column_stack(out)


def transform_image(image, op: str) -> np.ndarray:
    img = np.asarray(image)
    if op == "hflip":
        return img[:, ::-1].copy()
    if op == "vflip":
        return img[::-1, :].copy()
    if op == "rot90":
        return np.rot90(img, 1).copy()
    if op == "rot180":
        return np.rot90(img, 2).copy()
    if op == "rot270":
        return np.rot90(img, 3).copy()
    raise InvalidInputError(f"unknown geometric op {op!r}")


def transform_bbox(bbox: BoundingBox, op: str, image_size: tuple[int, int]) -> BoundingBox:
    x1, y1, x2, y2 = bbox.corners
    corners = np.array([[x1, y1], [x2, y1], [x2, y2], [x1, y2]])
    return BoundingBox.from_points(transform_points(corners, op, image_size))


@dataclass(frozen=True)
class Labels:
    keypoints: KeypointSet2D
    bbox: BoundingBox


def flip_rotate(image, labels: Labels, op: str) -> tuple[np.ndarray, Labels]:
    """Apply ``op`` to an image and its labels consistently."""
    img = _check_image(image)
    size = (img.shape[1], img.shape[0])
    kp = KeypointSet2D(transform_points(labels.keypoints.points, op, size), labels.keypoints.visibility)
    return transform_image(img, op), Labels(kp, transform_bbox(labels.bbox, op, size))


# ---------------------------------------------------------------------------
# Region of interest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CropRect:
    """Square crop with top-left corner ``(x0, y0)`` and side length ``side`` (pixels)."""

    x0: float
    y0: float
    side: float

    @property
    def center(self) -> tuple[float, float]:
        return (self.x0 + self.side / 2, self.y0 + self.side / 2)

    def to_crop(self, points, out_size: int = 224) -> np.ndarray:
        """Image-frame pixels to the resized crop frame."""
        p = np.asarray(points, dtype=float)
        s = out_size / self.side
        return np.column_stack([(p[:, 0] - self.x0) * s, (p[:, 1] - self.y0) * s])

    def to_image(self, points, out_size: int = 224) -> np.ndarray:
        """Resized crop-frame pixels back to the original image frame."""
        p = np.asarray(points, dtype=float)
        s = self.side / out_size
        return np.column_stack([p[:, 0] * s + self.x0, p[:, 1] * s + self.y0])


def _fit_axis(lo: float, side: float, extent: float) -> float:
    if side >= extent:
        return (extent - side) / 2
    return min(max(lo, 0.0), extent - side)


def roi_policy(
    bbox: BoundingBox,
    image_size: tuple[int, int],
    enlarge_pct: float = TEST_ENLARGE_PCT,
    shift_pct: tuple[float, float] = (0.0, 0.0),
) -> CropRect:
    """Square crop around a box.

    The side is ``max(w, h) * (1 + enlarge_pct / 100)``; the center moves by
    ``shift_pct / 100`` of that side in x and y. A square that crosses the
    image border is slid back inside; when it is larger than the image along
    an axis it is centered on the image along that axis instead.

    The defaults give the test-time policy (20 % enlargement, no shift).
    """
    W, H = image_size
    x1, y1, x2, y2 = bbox.corners
    if x2 < 0 or y2 < 0 or x1 > W or y1 > H:
        raise InvalidInputError("bounding box lies entirely outside the image")
    if enlarge_pct < 0:
        raise InvalidInputError("enlargement must be non-negative")
    side = max(bbox.w, bbox.h) * (1.0 + enlarge_pct / 100.0)
    if side <= 0:
        raise InvalidInputError("bounding box has zero size")
    cx = bbox.x + shift_pct[0] / 100.0 * side
    cy = bbox.y + shift_pct[1] / 100.0 * side
    return CropRect(_fit_axis(cx - side / 2, side, W), _fit_axis(cy - side / 2, side, H), side)


def sample_roi(bbox: BoundingBox, image_size, config: AugmentConfig, rng: np.random.Generator) -> CropRect:
    enlarge = rng.uniform(*config.roi_enlargement_factor)
    shift = (rng.uniform(*config.roi_shifting_factor), rng.uniform(*config.roi_shifting_factor))
    return roi_policy(bbox, image_size, enlarge, shift)


# ---------------------------------------------------------------------------
# Random erasing
# ---------------------------------------------------------------------------


def erase_rect(image_shape, config: AugmentConfig, rng: np.random.Generator, attempts: int = 100):
    """Sample ``(top, left, height, width)`` of an erasing rectangle, or None if none fits."""
    H, W = image_shape
    for _ in range(attempts):
        area = rng.uniform(*config.erase_area) * H * W
        aspect = rng.uniform(*config.erase_aspect)
        h = int(round(math.sqrt(area * aspect)))
        w = int(round(math.sqrt(area / aspect)))
        if 0 < h <= H and 0 < w <= W:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            return top, left, h, w
    return None


def random_erase(image, config: AugmentConfig, rng: np.random.Generator | None = None, fill: int = 0) -> np.ndarray:
    """With probability ``config.erase_prob`` blank a random rectangle to ``fill``."""
    img = _check_image(image)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    if not rng.random() < config.erase_prob:
        return img.copy()
    rect = erase_rect(img.shape, config, rng)
    out = img.copy()
    if rect is not None:
        top, left, h, w = rect
        out[top : top + h, left : left + w] = fill
    return out


# ---------------------------------------------------------------------------
# Full chain
# ---------------------------------------------------------------------------


@dataclass
class AugmentRecord:
    """Parameters actually applied, enough to undo the geometric part."""

    ops: list[str] = field(default_factory=list)
    photometric: PhotometricParams = field(default_factory=PhotometricParams)
    erased: bool = False

    def invert_points(self, points, image_size: tuple[int, int]) -> np.ndarray:
        """Map points from the augmented image back to the original (``image_size`` of the original)."""
        sizes = [tuple(image_size)]
        for op in self.ops:
            sizes.append(transformed_size(op, sizes[-1]))
        p = np.asarray(points, dtype=float)
        for op, size in zip(reversed(self.ops), reversed(sizes[1:])):
            p = transform_points(p, inverse_op(op), size)
        return p


def augment_sample(image, labels: Labels, config: AugmentConfig, rng: np.random.Generator, erase: bool = False):
    """Random flip/rotation, photometric change and (optionally) erasing.

    Returns ``(image, labels, record)``.
    """
    img = _check_image(image)
    rec = AugmentRecord()
    if rng.random() < config.flip_rotate_prob:
        op = GEOMETRIC_OPS[int(rng.integers(len(GEOMETRIC_OPS)))]
        img, labels = flip_rotate(img, labels, op)
        rec.ops.append(op)
    rec.photometric = sample_photometric(config, rng)
    p = rec.photometric
    img = photometric(img, p.alpha, p.beta, p.noise_std, rng)
    if erase:
        before = img
        img = random_erase(img, config, rng)
        rec.erased = not np.array_equal(before, img)
    return img, labels, rec
