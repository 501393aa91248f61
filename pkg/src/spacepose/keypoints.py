"""Recover 3D model keypoints from 2D picks in images with known poses.

For keypoint ``k`` seen in images ``j`` with pick ``(u_j, v_j)`` the projective
relation ``s_j [u_j, v_j, 1]^T = K (R_j p_k + t_j)`` is linear in the unknowns
``(p_k, s_j)`` once the homogeneous coordinate of ``p_k`` is fixed to 1. Each
keypoint therefore gives an independent dense linear least-squares problem
with ``3 + m`` unknowns and ``3 m`` equations.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateGeometryError, InvalidInputError, UnobservablePointError
from .geometry import NUM_KEYPOINTS, CameraIntrinsics, KeypointSet3D, Pose, project_points


@dataclass(frozen=True)
class Observation:
    """Keypoint picks in one image whose pose is known.

    ``picks`` maps keypoint index to the picked pixel ``(u, v)``.
    """

    image_id: int
    pose: Pose
    picks: dict[int, tuple[float, float]]

    def __post_init__(self):
        if not self.picks:
            raise InvalidInputError(f"image {self.image_id} has no picks")
        for k in self.picks:
            if not 0 <= k < NUM_KEYPOINTS:
                raise InvalidInputError(f"image {self.image_id}: pick index {k} out of range")


@dataclass(frozen=True)
class RecoverySolution:
    points3d: KeypointSet3D
    # scales[j, k] is the projective depth of keypoint k in observation j (NaN if unseen)
    scales: np.ndarray
    # root-mean-square pixel reprojection residual over all picks
    residual: float
    per_point_residual: np.ndarray


def _solve_point(camera: CameraIntrinsics, k: int, rows: list[tuple[Pose, np.ndarray]]):
    m = len(rows)
    K = camera.K
    A = np.zeros((3 * m, 3 + m))
    b = np.zeros(3 * m)
    for j, (pose, uv) in enumerate(rows):
        KR = K @ pose.R
        A[3 * j : 3 * j + 3, :3] = -KR
        A[3 * j : 3 * j + 3, 3 + j] = [uv[0], uv[1], 1.0]
        b[3 * j : 3 * j + 3] = K @ pose.t
    # column scaling keeps the depth and position unknowns comparable
    scale = np.linalg.norm(A, axis=0)
    sol, _, rank, sv = np.linalg.lstsq(A / scale, b, rcond=None)
    if rank < A.shape[1] or sv[-1] <= 1e-10 * sv[0]:
        raise DegenerateGeometryError(
            f"keypoint {k}: views do not constrain its position (rank {rank} of {A.shape[1]})"
        )
    sol = sol / scale
    return sol[:3], sol[3:]


def recover_keypoints(camera: CameraIntrinsics, obs: list[Observation]) -> RecoverySolution:
    """Least-squares 3D keypoint recovery from picks in posed images.

    Raises:
        UnobservablePointError: a keypoint is picked in fewer than two images.
        DegenerateGeometryError: the views of a keypoint leave its position
            unconstrained (e.g. identical camera centers).
    """
    if not obs:
        raise InvalidInputError("no observations given")
    per_point: list[list[tuple[int, Pose, np.ndarray]]] = [[] for _ in range(NUM_KEYPOINTS)]
    for j, o in enumerate(obs):
        for k, uv in o.picks.items():
            per_point[k].append((j, o.pose, np.asarray(uv, dtype=float)))

    pts = np.zeros((NUM_KEYPOINTS, 3))
    scales = np.full((len(obs), NUM_KEYPOINTS), np.nan)
    sq_err = np.zeros(NUM_KEYPOINTS)
    n_picks = np.zeros(NUM_KEYPOINTS, int)
    for k, rows in enumerate(per_point):
        if len(rows) < 2:
            raise UnobservablePointError(k, len(rows))
        p, s = _solve_point(camera, k, [(pose, uv) for _, pose, uv in rows])
        pts[k] = p
        for (j, pose, uv), sj in zip(rows, s):
            scales[j, k] = sj
            reproj = project_points(camera, pose, p[None])[0]
            sq_err[k] += float(np.sum((reproj - uv) ** 2))
        n_picks[k] = len(rows)

    return RecoverySolution(
        points3d=KeypointSet3D(pts),
        scales=scales,
        residual=float(np.sqrt(sq_err.sum() / n_picks.sum())),
        per_point_residual=np.sqrt(sq_err / n_picks),
    )


# ---------------------------------------------------------------------------
# Reprojection report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    range_lo: float
    range_hi: float
    count: int
    mean_error_px: float


def reprojection_report(
    camera: CameraIntrinsics,
    solution: RecoverySolution | KeypointSet3D,
    truth: KeypointSet3D,
    poses: list[Pose],
    bin_edges=None,
) -> list[ReportRow]:
    """Mean pixel distance between recovered and true keypoints, binned by range.

    Each pose contributes the mean over all 11 keypoints of the distance
    between the projections of the recovered and true points. Bins are
    half-open ``[lo, hi)`` intervals of ``||t||``; empty bins report NaN.
    """
    if not poses:
        raise InvalidInputError("reprojection_report needs at least one pose")
    recovered = solution.points3d if isinstance(solution, RecoverySolution) else solution
    ranges = np.array([np.linalg.norm(p.t) for p in poses])
    errs = np.array(
        [
            np.mean(
                np.linalg.norm(
                    project_points(camera, p, recovered.points) - project_points(camera, p, truth.points),
                    axis=1,
                )
            )
            for p in poses
        ]
    )
    if bin_edges is None:
        lo = np.floor(ranges.min())
        hi = np.floor(ranges.max()) + 1.0
        bin_edges = np.arange(lo, hi + 0.5, 1.0)
    edges = np.asarray(bin_edges, dtype=float)
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (ranges >= lo) & (ranges < hi)
        n = int(sel.sum())
        rows.append(ReportRow(float(lo), float(hi), n, float(errs[sel].mean()) if n else float("nan")))
    return rows


def report_to_csv(rows: list[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["range_lo_m", "range_hi_m", "count", "mean_reprojection_error_px"])
    for r in rows:
        w.writerow([r.range_lo, r.range_hi, r.count, r.mean_error_px])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Picks file
# ---------------------------------------------------------------------------


def load_picks(path: str | Path) -> list[Observation]:
    """Read a picks file: JSON array of ``{image_id, pose: {q, t}, picks: [{index, u, v}]}``."""
    data = json.loads(Path(path).read_text())
    if not isinstance(data, list):
        raise InvalidInputError("picks file must hold a JSON array")
    out = []
    for entry in data:
        try:
            picks = {int(p["index"]): (float(p["u"]), float(p["v"])) for p in entry["picks"]}
            out.append(Observation(int(entry["image_id"]), Pose.from_dict(entry["pose"]), picks))
        except (KeyError, TypeError) as e:
            raise InvalidInputError(f"malformed picks entry: {e!r}") from e
    return out


def save_picks(path: str | Path, obs: list[Observation]) -> None:
    data = [
        {
            "image_id": o.image_id,
            "pose": o.pose.to_dict(),
            "picks": [{"index": k, "u": float(u), "v": float(v)} for k, (u, v) in sorted(o.picks.items())],
        }
        for o in obs
    ]
    Path(path).write_text(json.dumps(data, indent=1))
