"""Detection-side mathematics for a single-object, three-stage YOLO-style head.

Raw head output for one stage is an array of shape ``(N, N, 3, 5)`` indexed
``[row, col, anchor, field]`` with fields ``(t_0, t_x, t_y, t_w, t_h)``. Cell
``(row, col)`` has grid origin ``(g_x, g_y) = (col, row)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InvalidInputError, ShapeError

STAGES = (13, 26, 52)
ANCHORS_PER_STAGE = 3
INPUT_SIZE = (416, 416)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box stored as center ``(x, y)`` and size ``(w, h)`` in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w >= 0 and self.h >= 0):
            raise InvalidInputError(f"box size must be non-negative, got w={self.w}, h={self.h}")

    @property
    def corners(self) -> tuple[float, float, float, float]:
        """``(x1, y1, x2, y2)``."""
        return (self.x - self.w / 2, self.y - self.h / 2, self.x + self.w / 2, self.y + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "BoundingBox":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @classmethod
    def from_points(cls, points) -> "BoundingBox":
        """Envelope of an (n, 2) point array."""
        p = np.asarray(points, dtype=float)
        lo, hi = p.min(axis=0), p.max(axis=0)
        return cls.from_corners(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h])

    def to_list(self) -> list[float]:
        return [float(self.x), float(self.y), float(self.w), float(self.h)]


@dataclass(frozen=True)
class Anchor:
    p_w: float
    p_h: float

    def __post_init__(self):
        if not (self.p_w > 0 and self.p_h > 0):
            raise InvalidInputError(f"anchor size must be positive, got ({self.p_w}, {self.p_h})")

    @property
    def area(self) -> float:
        return self.p_w * self.p_h


@dataclass(frozen=True)
class GridPrediction:
    """Raw logits of one detection stage, shape ``(N, N, 3, 5)``."""

    logits: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.logits, dtype=float)
        if a.ndim != 4 or a.shape[0] != a.shape[1] or a.shape[2:] != (ANCHORS_PER_STAGE, 5):
            raise ShapeError(f"stage tensor must have shape (N, N, 3, 5), got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise InvalidInputError("stage tensor contains non-finite logits")
        a.setflags(write=False)
        object.__setattr__(self, "logits", a)

    @property
    def size(self) -> int:
        return self.logits.shape[0]


# ---------------------------------------------------------------------------
# IoU and GIoU
# ---------------------------------------------------------------------------


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ax1, ay1, ax2, ay2 = a.corners
    bx1, by1, bx2, by2 = b.corners
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    # areas from the same corners, so identical boxes give exactly 1
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0 or inter <= 0:
        return 0.0
    return min(1.0, inter / union)


def giou(a: BoundingBox, b: BoundingBox) -> float:
    return 1.0 - giou_loss(a, b)[0]


def giou_loss(pred: BoundingBox, truth: BoundingBox) -> tuple[float, np.ndarray]:
    """``1 - GIoU`` and its analytic gradient with respect to ``(x, y, w, h)`` of ``pred``.

    Where a min/max is tied (shared edges) the derivative is one-sided.
    """
    if not truth.area > 0:
        raise InvalidInputError("ground-truth box must have positive area")
    px1, py1, px2, py2 = pred.corners
    tx1, ty1, tx2, ty2 = truth.corners
    # d(corner)/d(x, y, w, h)
    dx1 = np.array([1.0, 0.0, -0.5, 0.0])
    dx2 = np.array([1.0, 0.0, 0.5, 0.0])
    dy1 = np.array([0.0, 1.0, 0.0, -0.5])
    dy2 = np.array([0.0, 1.0, 0.0, 0.5])
    zero = np.zeros(4)

    iw_raw = min(px2, tx2) - max(px1, tx1)
    ih_raw = min(py2, ty2) - max(py1, ty1)
    iw, ih = max(0.0, iw_raw), max(0.0, ih_raw)
    d_iw = ((dx2 if px2 < tx2 else zero) - (dx1 if px1 > tx1 else zero)) if iw_raw > 0 else zero
    d_ih = ((dy2 if py2 < ty2 else zero) - (dy1 if py1 > ty1 else zero)) if ih_raw > 0 else zero
    inter = iw * ih
    d_inter = d_iw * ih + iw * d_ih

    area_p = pred.w * pred.h
    d_area_p = np.array([0.0, 0.0, pred.h, pred.w])
    union = area_p + truth.area - inter
    d_union = d_area_p - d_inter

    cw = max(px2, tx2) - min(px1, tx1)
    ch = max(py2, ty2) - min(py1, ty1)
    d_cw = (dx2 if px2 > tx2 else zero) - (dx1 if px1 < tx1 else zero)
    d_ch = (dy2 if py2 > ty2 else zero) - (dy1 if py1 < ty1 else zero)
    enclose = cw * ch
    d_enclose = d_cw * ch + cw * d_ch

    # loss = 1 - (I/U - (C - U)/C) = 2 - I/U - U/C
    # rounding can push identical boxes a hair below zero
    loss = max(0.0, 2.0 - inter / union - union / enclose)
    grad = -(d_inter * union - inter * d_union) / union**2 - (d_union * enclose - union * d_enclose) / enclose**2
    return float(loss), grad


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class Detection:
    objectness: float
    box: BoundingBox
    stage: int = 0
    row: int = 0
    col: int = 0
    anchor: int = 0

    def key(self) -> tuple[int, int, int, int]:
        return (self.stage, self.row, self.col, self.anchor)


@dataclass(frozen=True)
class DecodedStage:
    """Vectorized decode of one stage: ``objectness`` (N, N, 3) and ``boxes`` (N, N, 3, 4)."""

    stage: int
    objectness: np.ndarray
    boxes: np.ndarray

    def detection(self, row: int, col: int, anchor: int) -> Detection:
        return Detection(
            float(self.objectness[row, col, anchor]),
            BoundingBox(*map(float, self.boxes[row, col, anchor])),
            self.stage, row, col, anchor,
        )

    def __iter__(self):
        N = self.objectness.shape[0]
        for r in range(N):
            for c in range(N):
                for a in range(self.objectness.shape[2]):
                    yield self.detection(r, c, a)


def _strides(N: int, image_size) -> tuple[float, float]:
    W, H = image_size
    return W / N, H / N


def decode_stage(pred: GridPrediction, anchors: Sequence[Anchor], image_size=INPUT_SIZE, stage: int = 0) -> DecodedStage:
    """Decode raw logits to objectness and pixel boxes.

    ``x = (sigmoid(t_x) + g_x) * stride_x``, ``w = p_w * exp(t_w)`` with anchor
    sizes already in pixels.
    """
    if len(anchors) != ANCHORS_PER_STAGE:
        raise ConfigurationError(f"each stage needs {ANCHORS_PER_STAGE} anchors, got {len(anchors)}")
    N = pred.size
    sx, sy = _strides(N, image_size)
    t = pred.logits
    gy, gx = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
    pw = np.array([a.p_w for a in anchors])
    ph = np.array([a.p_h for a in anchors])
    boxes = np.empty((N, N, ANCHORS_PER_STAGE, 4))
    boxes[..., 0] = (sigmoid(t[..., 1]) + gx[..., None]) * sx
    boxes[..., 1] = (sigmoid(t[..., 2]) + gy[..., None]) * sy
    boxes[..., 2] = pw * np.exp(t[..., 3])
    boxes[..., 3] = ph * np.exp(t[..., 4])
    return DecodedStage(stage, sigmoid(t[..., 0]), boxes)


def decode(pred: GridPrediction, anchors: Sequence[Anchor], image_size=INPUT_SIZE, stage: int = 0) -> list[Detection]:
    """Every ``(objectness, box)`` pair of a stage, in row, col, anchor order."""
    return list(decode_stage(pred, anchors, image_size, stage))


def encode(box: BoundingBox, anchor: Anchor, N: int, image_size=INPUT_SIZE, objectness: float | None = None):
    """Inverse of :func:`decode` for one box.

    Returns ``(row, col, logits)`` where ``logits`` is ``(t_0, t_x, t_y, t_w, t_h)``;
    ``t_0`` is NaN unless ``objectness`` is given. The center must lie strictly
    inside its cell so that the sigmoid can be inverted.
    """
    sx, sy = _strides(N, image_size)
    gxf, gyf = box.x / sx, box.y / sy
    col, row = math.floor(gxf), math.floor(gyf)
    fx, fy = gxf - col, gyf - row
    if not (0 <= col < N and 0 <= row < N):
        raise InvalidInputError("box center lies outside the grid")
    if not (0 < fx < 1 and 0 < fy < 1):
        raise InvalidInputError("box center lies on a cell boundary; sigmoid offset not invertible")
    if not (box.w > 0 and box.h > 0):
        raise InvalidInputError("encode needs a box with positive size")
    t0 = float(logit(objectness)) if objectness is not None else float("nan")
    logits = np.array([t0, logit(fx), logit(fy), math.log(box.w / anchor.p_w), math.log(box.h / anchor.p_h)])
    return row, col, logits


def select_best(stages: Sequence[DecodedStage]) -> Detection:
    """Highest-objectness detection over all stages, cells and anchors.

    Ties resolve to the lexicographically first ``(stage, row, col, anchor)``;
    stages are ranked by their position in ``stages``.
    """
    if not stages:
        raise InvalidInputError("select_best needs at least one decoded stage")
    best = None
    for si, st in enumerate(stages):
        flat = st.objectness.reshape(-1)
        i = int(np.argmax(flat))
        if best is None or flat[i] > best[0]:
            best = (flat[i], si, i)
    _, si, i = best
    r, c, a = np.unravel_index(i, stages[si].objectness.shape)
    det = stages[si].detection(int(r), int(c), int(a))
    return Detection(det.objectness, det.box, si, det.row, det.col, det.anchor)


# ---------------------------------------------------------------------------
# Anchors, targets and loss
# ---------------------------------------------------------------------------


def allocate_anchors(anchors: Sequence[Anchor]) -> list[list[int]]:
    """Indices of the anchors used by each stage, coarsest grid first.

    Anchors are ranked by area; the three largest go to the 13x13 stage, the
    three smallest to the 52x52 stage. Equal areas keep input order.
    """
    if len(anchors) != ANCHORS_PER_STAGE * len(STAGES):
        raise ConfigurationError(f"expected {ANCHORS_PER_STAGE * len(STAGES)} anchors, got {len(anchors)}")
    order = sorted(range(len(anchors)), key=lambda i: (-anchors[i].area, i))
    return [sorted(order[s * 3 : s * 3 + 3], key=lambda i: (anchors[i].area, i)) for s in range(len(STAGES))]


def shape_iou(w1, h1, w2, h2) -> float:
    """IoU of two boxes sharing a center."""
    inter = min(w1, w2) * min(h1, h2)
    union = w1 * h1 + w2 * h2 - inter
    return inter / union if union > 0 else 0.0


@dataclass(frozen=True)
class TargetAssignment:
    targets: list[np.ndarray]   # per stage, shape (N, N, 3)
    stage: int
    row: int
    col: int
    slot: int                   # anchor position within the stage
    anchor_index: int           # index into the 9-anchor list


def assign_targets(truth: BoundingBox, anchors: Sequence[Anchor], image_size=INPUT_SIZE, stages=STAGES) -> TargetAssignment:
    """One-hot objectness targets: the cell containing the box center at the best-matching anchor."""
    W, H = image_size
    if not (0 <= truth.x < W and 0 <= truth.y < H):
        raise InvalidInputError("ground-truth box center lies outside the image")
    alloc = allocate_anchors(anchors)
    ious = [shape_iou(truth.w, truth.h, a.p_w, a.p_h) for a in anchors]
    best = int(np.argmax(ious))
    stage = next(s for s, idx in enumerate(alloc) if best in idx)
    slot = alloc[stage].index(best)
    N = stages[stage]
    sx, sy = _strides(N, image_size)
    col = min(int(truth.x // sx), N - 1)
    row = min(int(truth.y // sy), N - 1)
    targets = [np.zeros((n, n, ANCHORS_PER_STAGE)) for n in stages]
    targets[stage][row, col, slot] = 1.0
    return TargetAssignment(targets, stage, row, col, slot, best)


def bce_with_logits(logits, targets) -> np.ndarray:
    """Elementwise binary cross-entropy of ``sigmoid(logits)`` against ``targets``."""
    x = np.asarray(logits, dtype=float)
    y = np.asarray(targets, dtype=float)
    # log(1 + e^x) - y x, computed without overflow
    return np.logaddexp(0.0, x) - y * x


@dataclass(frozen=True)
class DetectionLoss:
    total: float
    giou: float
    conf: float


def detection_loss(
    preds: Sequence[GridPrediction],
    truth: BoundingBox,
    anchors: Sequence[Anchor],
    image_size=INPUT_SIZE,
    lambda_giou: float = 1.0,
    lambda_conf: float = 1.0,
) -> DetectionLoss:
    """``lambda_giou * (1 - GIoU) + lambda_conf * sum(BCE)``.

    The GIoU term uses the box decoded at the assigned location; the BCE sum
    runs over every cell and anchor of every stage.
    """
    if lambda_giou < 0 or lambda_conf < 0:
        raise ConfigurationError("loss weights must be non-negative")
    stages = tuple(p.size for p in preds)
    alloc = allocate_anchors(anchors)
    if len(preds) != len(alloc):
        raise ConfigurationError(f"expected {len(alloc)} stage tensors, got {len(preds)}")
    tgt = assign_targets(truth, anchors, image_size, stages)
    conf = sum(float(bce_with_logits(p.logits[..., 0], t).sum()) for p, t in zip(preds, tgt.targets))
    stage_anchors = [anchors[i] for i in alloc[tgt.stage]]
    dec = decode_stage(preds[tgt.stage], stage_anchors, image_size, tgt.stage)
    box = dec.detection(tgt.row, tgt.col, tgt.slot).box
    g, _ = giou_loss(box, truth)
    return DetectionLoss(lambda_giou * g + lambda_conf * conf, g, conf)


# ---------------------------------------------------------------------------
# k-means anchors
# ---------------------------------------------------------------------------


def _wh_iou_matrix(wh: np.ndarray, centers: np.ndarray) -> np.ndarray:
    inter = np.minimum(wh[:, None, 0], centers[None, :, 0]) * np.minimum(wh[:, None, 1], centers[None, :, 1])
    union = (wh[:, 0] * wh[:, 1])[:, None] + (centers[:, 0] * centers[:, 1])[None, :] - inter
    return inter / union


@dataclass
class KMeansResult:
    anchors: list[Anchor]
    assignments: np.ndarray
    history: list[float] = field(default_factory=list)   # total 1 - IoU after each assignment
    iterations: int = 0
    converged: bool = False


def kmeans_anchors_detailed(boxes: Sequence[BoundingBox], k: int = 9, seed: int = 0, max_iter: int = 300) -> KMeansResult:
    """k-means over box sizes with distance ``1 - IoU`` at a shared center.

    Seeding is k-means++ on the same distance. The centroid of a cluster is
    the mean ``(w, h)`` of its members, except that an update that would raise
    the cluster's total distance is rejected, which keeps the objective
    non-increasing. Empty clusters are re-seeded at the worst-fit box.
    """
    wh = np.array([[b.w, b.h] for b in boxes], dtype=float)
    if len(wh) < k:
        raise InvalidInputError(f"need at least k={k} boxes, got {len(wh)}")
    if np.any(wh <= 0):
        raise InvalidInputError("all boxes must have positive width and height")
    rng = np.random.default_rng(seed)

    centers = [wh[rng.integers(len(wh))]]
    for _ in range(1, k):
        d = 1.0 - _wh_iou_matrix(wh, np.array(centers)).max(axis=1)
        w = d**2
        if w.sum() <= 0:
            centers.append(wh[rng.integers(len(wh))])
        else:
            centers.append(wh[rng.choice(len(wh), p=w / w.sum())])
    centers = np.array(centers)

    res = KMeansResult([], np.zeros(len(wh), int))
    assign = None
    for it in range(1, max_iter + 1):
        dist = 1.0 - _wh_iou_matrix(wh, centers)
        new_assign = dist.argmin(axis=1)
        res.history.append(float(dist[np.arange(len(wh)), new_assign].sum()))
        res.iterations = it
        if assign is not None and np.array_equal(new_assign, assign):
            res.converged = True
            break
        assign = new_assign
        for c in range(k):
            members = wh[assign == c]
            if len(members) == 0:
                worst = int(np.argmax(dist[np.arange(len(wh)), assign]))
                centers[c] = wh[worst]
                continue
            cand = members.mean(axis=0)
            old_cost = np.sum(1.0 - _wh_iou_matrix(members, centers[c : c + 1]))
            new_cost = np.sum(1.0 - _wh_iou_matrix(members, cand[None]))
            if new_cost <= old_cost:
                centers[c] = cand

    order = np.argsort(centers[:, 0] * centers[:, 1], kind="stable")
    remap = np.empty(k, int)
    remap[order] = np.arange(k)
    res.anchors = [Anchor(float(w), float(h)) for w, h in centers[order]]
    res.assignments = remap[assign]
    return res


def kmeans_anchors(boxes: Sequence[BoundingBox], k: int = 9, seed: int = 0, max_iter: int = 300) -> list[Anchor]:
    """``k`` anchors sorted by ascending area; see :func:`kmeans_anchors_detailed`."""
    return kmeans_anchors_detailed(boxes, k, seed, max_iter).anchors


def save_anchors(path: str | Path, anchors: Sequence[Anchor]) -> None:
    Path(path).write_text(json.dumps([{"p_w": a.p_w, "p_h": a.p_h} for a in anchors], indent=1))


def load_anchors(path: str | Path) -> list[Anchor]:
    data = json.loads(Path(path).read_text())
    try:
        return [Anchor(float(d["p_w"]), float(d["p_h"])) for d in data]
    except (KeyError, TypeError) as e:
        raise InvalidInputError(f"malformed anchors file: {e!r}") from e


# ---------------------------------------------------------------------------
# Raw prediction tensor files
# ---------------------------------------------------------------------------


def write_prediction_tensor(bin_path: str | Path, header_path: str | Path, preds: Sequence[GridPrediction], dtype="float32") -> None:
    """Flat little-endian binary, stage-major then row, col, anchor, field; JSON header alongside."""
    dt = np.dtype(dtype).newbyteorder("<")
    with open(bin_path, "wb") as f:
        for p in preds:
            f.write(np.ascontiguousarray(p.logits, dtype=dt).tobytes())
    header = {
        "stages": [p.size for p in preds],
        "anchors_per_cell": ANCHORS_PER_STAGE,
        "fields": ["t0", "tx", "ty", "tw", "th"],
        "dtype": np.dtype(dtype).name,
        "byteorder": "little",
        "layout": "stage, row, col, anchor, field",
    }
    Path(header_path).write_text(json.dumps(header, indent=1))


def read_prediction_tensor(bin_path: str | Path, header_path: str | Path) -> list[GridPrediction]:
    header = json.loads(Path(header_path).read_text())
    try:
        stages = [int(n) for n in header["stages"]]
        n_anchor = int(header.get("anchors_per_cell", ANCHORS_PER_STAGE))
        dt = np.dtype(header.get("dtype", "float32")).newbyteorder("<" if header.get("byteorder", "little") == "little" else ">")
    except (KeyError, TypeError) as e:
        raise InvalidInputError(f"malformed tensor header: {e!r}") from e
    raw = np.fromfile(bin_path, dtype=dt)
    expected = sum(n * n * n_anchor * 5 for n in stages)
    if raw.size != expected:
        raise ShapeError(f"tensor file holds {raw.size} values, header implies {expected}")
    out, off = [], 0
    for n in stages:
        size = n * n * n_anchor * 5
        out.append(GridPrediction(raw[off : off + size].astype(float).reshape(n, n, n_anchor, 5)))
        off += size
    return out
