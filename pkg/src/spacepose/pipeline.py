"""End-to-end pose pipeline (detection -> RoI -> keypoints -> EPnP) and evaluation."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .augment import CropRect, roi_policy
from .detect import BoundingBox, iou
from .dataset import DatasetSample, LabelFile, PoseRecord
from .errors import InvalidInputError, SpacePoseError
from .geometry import NUM_KEYPOINTS, KeypointSet2D, rotation_error, translation_error
from .pnp import solve_epnp

log = logging.getLogger(__name__)

ORACLE = "oracle"
CROP_SIZE = 224


@dataclass(frozen=True)
class RunConfig:
    """Noise injected in oracle mode, both in original-image pixels."""

    keypoint_noise: float = 0.0
    bbox_noise: float = 0.0
    seed: int = 0
    crop_size: int = CROP_SIZE


def _keypoints_from_record(rec: dict, rect: CropRect, crop_size: int) -> np.ndarray:
    pts = np.asarray(rec["keypoints"], dtype=float)
    if pts.shape != (NUM_KEYPOINTS, 2):
        raise InvalidInputError(f"keypoint record must hold {NUM_KEYPOINTS} (u, v) pairs, got {pts.shape}")
    frame = rec.get("frame", "crop")
    if frame == "image":
        return pts
    if frame != "crop":
        raise InvalidInputError(f"unknown keypoint frame {frame!r}")
    return rect.to_image(pts, int(rec.get("crop_size", crop_size)))


def run_sample(
    labels: LabelFile,
    sample: DatasetSample,
    detection: BoundingBox | None,
    keypoint_record: dict | str | None,
    rng: np.random.Generator,
    config: RunConfig = RunConfig(),
) -> PoseRecord:
    """Pose one sample. ``keypoint_record`` is a crop-frame record or :data:`ORACLE`."""
    if detection is None:
        return PoseRecord(sample.sample_id, "failed", error="no detection for sample")
    try:
        rect = roi_policy(detection, labels.camera.image_size)
        if keypoint_record == ORACLE:
            truth = sample.keypoints.points
            noisy = truth + rng.normal(0.0, config.keypoint_noise, truth.shape) if config.keypoint_noise > 0 else truth
            # the network sees and reports the crop frame
            crop_pts = rect.to_crop(noisy, config.crop_size)
            pts = rect.to_image(crop_pts, config.crop_size)
            vis = sample.keypoints.visibility
        elif keypoint_record is None:
            return PoseRecord(sample.sample_id, "failed", bbox=detection, error="no keypoints for sample")
        else:
            pts = _keypoints_from_record(keypoint_record, rect, config.crop_size)
            vis = keypoint_record.get("visible")
        pose = solve_epnp(labels.camera, labels.model, KeypointSet2D(pts, vis))
    except SpacePoseError as e:
        return PoseRecord(sample.sample_id, "failed", bbox=detection, error=str(e))
    return PoseRecord(sample.sample_id, "ok", pose, detection)


def pipeline_run(
    labels: LabelFile,
    detections: dict[str, dict] | str = ORACLE,
    keypoints: dict[str, dict] | str = ORACLE,
    config: RunConfig = RunConfig(),
) -> list[PoseRecord]:
    """Run every labelled sample through the pipeline, in label order.

    ``detections``/``keypoints`` are either :data:`ORACLE` (use ground truth,
    plus ``config`` noise) or id-keyed records as read from JSON-lines files.
    A sample that fails is recorded as failed and the run continues.
    """
    rng = np.random.default_rng(config.seed)
    out = []
    for s in labels.samples:
        if detections == ORACLE:
            det = s.bbox
            if config.bbox_noise > 0:
                dx, dy, dw, dh = rng.normal(0.0, config.bbox_noise, 4)
                det = BoundingBox(det.x + dx, det.y + dy, max(det.w + dw, 1.0), max(det.h + dh, 1.0))
        else:
            rec = detections.get(s.sample_id)
            det = BoundingBox(*rec["bbox"]) if rec is not None and rec.get("bbox") is not None else None
        kp = ORACLE if keypoints == ORACLE else keypoints.get(s.sample_id)
        r = run_sample(labels, s, det, kp, rng, config)
        if not r.ok:
            log.warning("sample %s failed: %s", s.sample_id, r.error)
        out.append(r)
    return out


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class RangeBin:
    range_lo: float
    range_hi: float
    count: int
    mean_translation_error_m: float
    mean_rotation_error_deg: float
    mean_score: float


@dataclass
class MetricsReport:
    n_samples: int
    n_failed: int
    mean_iou: float
    median_iou: float
    mean_et: np.ndarray
    median_et: np.ndarray
    mean_er_deg: float
    median_er_deg: float
    score: float
    bins: list[RangeBin] = field(default_factory=list)
    failed_ids: list[str] = field(default_factory=list)

    def rows(self) -> list[tuple[str, str]]:
        def vec(v):
            return "[" + ", ".join(f"{x:.6f}" for x in v) + "]"

        return [
            ("Samples evaluated", str(self.n_samples - self.n_failed)),
            ("Failed samples", str(self.n_failed)),
            ("Mean IoU", f"{self.mean_iou:.6f}"),
            ("Median IoU", f"{self.median_iou:.6f}"),
            ("Mean E_T [m]", vec(self.mean_et)),
            ("Median E_T [m]", vec(self.median_et)),
            ("Mean E_R [deg]", f"{self.mean_er_deg:.6f}"),
            ("Median E_R [deg]", f"{self.median_er_deg:.6f}"),
            ("SLAB/ESA Score", f"{self.score:.6g}"),
        ]

    def table(self) -> str:
        rows = self.rows()
        w = max(len(k) for k, _ in rows)
        lines = [f"{'Metric':<{w}}  Value", f"{'-' * w}  {'-' * 30}"]
        lines += [f"{k:<{w}}  {v}" for k, v in rows]
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["metric", "value"])
        wr.writerow(["n_samples", self.n_samples])
        wr.writerow(["n_failed", self.n_failed])
        wr.writerow(["mean_iou", self.mean_iou])
        wr.writerow(["median_iou", self.median_iou])
        for name, v in (("mean_et", self.mean_et), ("median_et", self.median_et)):
            for axis, x in zip("xyz", v):
                wr.writerow([f"{name}_{axis}_m", x])
        wr.writerow(["mean_er_deg", self.mean_er_deg])
        wr.writerow(["median_er_deg", self.median_er_deg])
        wr.writerow(["slab_esa_score", self.score])
        return buf.getvalue()

    def bins_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["range_lo_m", "range_hi_m", "count", "mean_translation_error_m", "mean_rotation_error_deg", "mean_score"])
        for b in self.bins:
            wr.writerow([b.range_lo, b.range_hi, b.count, b.mean_translation_error_m, b.mean_rotation_error_deg, b.mean_score])
        return buf.getvalue()


def _mean(x) -> float:
    return float(np.mean(x)) if len(x) else math.nan


def _median(x) -> float:
    return float(np.median(x)) if len(x) else math.nan


def evaluate(predictions: list[PoseRecord], labels: list[DatasetSample], bin_width: float = 2.0) -> MetricsReport:
    """Detection and pose metrics of predictions against labels.

    Both lists must cover the same ids. Failed predictions are counted and
    excluded from every mean; IoU uses the predicted box when present.

    Raises:
        InvalidInputError: ids do not match, or no prediction succeeded.
    """
    truth = {s.sample_id: s for s in labels}
    preds = {p.sample_id: p for p in predictions}
    missing = sorted(set(truth) - set(preds))
    extra = sorted(set(preds) - set(truth))
    if missing or extra or not truth:
        raise InvalidInputError(
            f"prediction/label ids differ: missing predictions {missing[:20]}, unknown ids {extra[:20]}"
            + (" (lists truncated)" if len(missing) > 20 or len(extra) > 20 else "")
        )

    ious, ets, ers, scores, ranges, failed = [], [], [], [], [], []
    for sid in sorted(truth):
        s, p = truth[sid], preds[sid]
        if not p.ok:
            failed.append(sid)
            continue
        if p.bbox is not None:
            ious.append(iou(p.bbox, s.bbox))
        et = translation_error(p.pose.t, s.pose.t)
        er = rotation_error(p.pose.q, s.pose.q)
        tn = float(np.linalg.norm(s.pose.t))
        if tn == 0:
            raise InvalidInputError(f"sample {sid}: ground-truth translation has zero norm")
        ets.append(et)
        ers.append(er)
        scores.append(float(np.linalg.norm(p.pose.t - s.pose.t)) / tn + er)
        ranges.append(tn)
    if not scores:
        raise InvalidInputError("no successful predictions to evaluate")

    ets_a = np.array(ets)
    ers_deg = np.degrees(ers)
    ranges_a = np.array(ranges)
    scores_a = np.array(scores)
    edges = np.arange(np.floor(ranges_a.min() / bin_width) * bin_width, ranges_a.max() + bin_width, bin_width)
    bins = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (ranges_a >= lo) & (ranges_a < hi)
        if not sel.any():
            continue
        bins.append(RangeBin(float(lo), float(hi), int(sel.sum()),
                             float(np.linalg.norm(ets_a[sel], axis=1).mean()),
                             float(ers_deg[sel].mean()), float(scores_a[sel].mean())))

    return MetricsReport(
        n_samples=len(truth),
        n_failed=len(failed),
        mean_iou=_mean(ious),
        median_iou=_median(ious),
        mean_et=ets_a.mean(axis=0),
        median_et=np.median(ets_a, axis=0),
        mean_er_deg=float(ers_deg.mean()),
        median_er_deg=float(np.median(ers_deg)),
        score=float(scores_a.mean()),
        bins=bins,
        failed_ids=failed,
    )
