"""Pose from 2D-3D keypoint correspondences.

:func:`epnp` follows Lepetit, Moreno-Noguer and Fua (2009): points are
expressed as barycentric combinations of four control points (three for a
planar model), the camera-frame control points are sought in the null space
of the projection system, the null-space weights are fixed by preserving
inter-control-point distances and polished by Gauss-Newton, and the pose is
read off with Horn's closed-form absolute orientation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import (
    DegenerateGeometryError,
    InsufficientCorrespondencesError,
    NoValidPoseError,
)
from .geometry import (
    CameraIntrinsics,
    KeypointSet2D,
    KeypointSet3D,
    Pose,
    canonical_quaternion,
    quat_from_axis_angle,
    quat_multiply,
    quat_to_rotmat,
)

log = logging.getLogger(__name__)

PLANAR_TOL = 1e-12
BETA_GN_ITERS = 10


@dataclass
class EPnPResult:
    R: np.ndarray
    t: np.ndarray
    q: np.ndarray
    reprojection_rms: float
    n_betas: int

    @property
    def pose(self) -> Pose:
        return Pose(self.q, self.t)


def _control_points(Pw: np.ndarray) -> np.ndarray:
    c0 = Pw.mean(axis=0)
    A = Pw - c0
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    scale = s[0]
    if scale == 0 or s[1] <= PLANAR_TOL * scale:
        raise DegenerateGeometryError("3D points are collinear or coincident")
    n = len(Pw)
    if s[2] <= PLANAR_TOL * scale:
        axes = Vt[:2] * (s[:2, None] / np.sqrt(n))
    else:
        axes = Vt * (s[:, None] / np.sqrt(n))
    return np.vstack([c0, c0 + axes])


def _barycentric(Pw: np.ndarray, C: np.ndarray) -> np.ndarray:
    B = (C[1:] - C[0]).T
    coef, *_ = np.linalg.lstsq(B, (Pw - C[0]).T, rcond=None)
    return np.column_stack([1.0 - coef.sum(axis=0), coef.T])


def _horn(Pw: np.ndarray, Pc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form ``q, t`` minimizing ``sum ||R(q) Pw_i + t - Pc_i||^2``."""
    mw = Pw.mean(axis=0)
    mc = Pc.mean(axis=0)
    S = (Pw - mw).T @ (Pc - mc)
    (Sxx, Sxy, Sxz), (Syx, Syy, Syz), (Szx, Szy, Szz) = S
    N = np.array(
        [
            [Sxx + Syy + Szz, Syz - Szy, Szx - Sxz, Sxy - Syx],
            [Syz - Szy, Sxx - Syy - Szz, Sxy + Syx, Szx + Sxz],
            [Szx - Sxz, Sxy + Syx, -Sxx + Syy - Szz, Syz + Szy],
            [Sxy - Syx, Szx + Sxz, Syz + Szy, -Sxx - Syy + Szz],
        ]
    )
    _, V = np.linalg.eigh(N)
    q = canonical_quaternion(V[:, -1])
    R = quat_to_rotmat(q)
    return q, mc - R @ mw


def _reprojection_rms(R, t, Pw, xy) -> float:
    Pc = Pw @ R.T + t
    proj = Pc[:, :2] / Pc[:, 2:3]
    return float(np.sqrt(np.mean(np.sum((proj - xy) ** 2, axis=1))))


def _pair_terms(V: np.ndarray, n_ctrl: int, pairs) -> np.ndarray:
    """Control-point differences of each kernel vector: shape (pairs, N, 3)."""
    Vr = V.reshape(V.shape[0], n_ctrl, 3)
    return np.stack([Vr[:, i] - Vr[:, j] for i, j in pairs])


def _initial_betas(dv: np.ndarray, d2: np.ndarray) -> np.ndarray | None:
    n_pairs, N, _ = dv.shape
    prods = [(a, b) for a in range(N) for b in range(a, N)]
    if len(prods) > n_pairs:
        return None
    L = np.column_stack(
        [
            np.einsum("pk,pk->p", dv[:, a], dv[:, b]) * (1.0 if a == b else 2.0)
            for a, b in prods
        ]
    )
    sol, *_ = np.linalg.lstsq(L, d2, rcond=None)
    b = dict(zip(prods, sol))
    beta = np.zeros(N)
    beta[0] = np.sqrt(abs(b[(0, 0)]))
    if beta[0] == 0:
        return None
    for k in range(1, N):
        beta[k] = b[(0, k)] / beta[0]
    return beta


def _refine_betas(beta: np.ndarray, dv: np.ndarray, d2: np.ndarray) -> np.ndarray:
    for _ in range(BETA_GN_ITERS):
        diff = np.einsum("k,pkc->pc", beta, dv)
        r = np.sum(diff**2, axis=1) - d2
        J = 2.0 * np.einsum("pc,pkc->pk", diff, dv)
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        beta = beta + step
    return beta


def epnp(points3d, points2d, K) -> EPnPResult:
    """EPnP on raw arrays: ``points3d`` (n, 3), ``points2d`` (n, 2) pixels, ``K`` 3x3.

    Each of the 1-, 2- and 3-vector closed-form initializations is refined by
    Gauss-Newton twice: within its own N vectors, and over the four smallest
    singular vectors. The candidate with the smallest reprojection error
    among those placing the model in front of the camera is returned.
    Correspondences are sorted into a canonical order first, so the result
    does not depend on the order they are given in.
    """
    Pw = np.asarray(points3d, dtype=float)
    uv = np.asarray(points2d, dtype=float)
    K = np.asarray(K, dtype=float)
    n = len(Pw)
    if n < 4 or len(uv) != n:
        raise InsufficientCorrespondencesError(
            f"EPnP needs at least 4 matched correspondences, got {n} 3D / {len(uv)} 2D"
        )

    order = np.lexsort(np.column_stack([Pw, uv]).T[::-1])
    Pw, uv = Pw[order], uv[order]

    C = _control_points(Pw)
    n_ctrl = len(C)
    alphas = _barycentric(Pw, C)

    # normalized image coordinates keep M well scaled
    h = np.column_stack([uv, np.ones(n)]) @ np.linalg.inv(K).T
    xy = h[:, :2] / h[:, 2:]
    M = np.zeros((2 * n, 3 * n_ctrl))
    M[0::2, 0::3] = alphas
    M[0::2, 2::3] = -alphas * xy[:, :1]
    M[1::2, 1::3] = alphas
    M[1::2, 2::3] = -alphas * xy[:, 1:]
    # right singular vectors of M are the eigenvectors of M^T M
    _, _, Vt = np.linalg.svd(M)
    kernel = Vt[::-1]

    pairs = list(combinations(range(n_ctrl), 2))
    d2 = np.array([np.sum((C[i] - C[j]) ** 2) for i, j in pairs])

    # Gauss-Newton runs over as many kernel vectors as there are distance
    # constraints allow (4 for a general model, 3 for a planar one)
    n_refine = min(4, len(pairs))
    dv_all = _pair_terms(kernel[:n_refine], n_ctrl, pairs)

    candidates = []
    for N in (1, 2, 3):
        beta = _initial_betas(dv_all[:, :N], d2)
        if beta is None:
            continue
        candidates.append((N, _refine_betas(beta, dv_all[:, :N], d2)))
        if n_refine > N:
            candidates.append((N, _refine_betas(np.concatenate([beta, np.zeros(n_refine - N)]), dv_all, d2)))

    best: EPnPResult | None = None
    for N, beta in candidates:
        Cc = (beta @ kernel[: len(beta)]).reshape(n_ctrl, 3)
        Pc = alphas @ Cc
        if Pc[:, 2].mean() < 0:
            Cc, Pc = -Cc, -Pc
        if not Pc[:, 2].mean() > 0:
            log.debug("EPnP candidate N=%d rejected: centroid behind camera", N)
            continue
        q, t = _horn(Pw, Pc)
        R = quat_to_rotmat(q)
        err = _reprojection_rms(R, t, Pw, xy)
        if not np.isfinite(err):
            continue
        if best is None or err < best.reprojection_rms:
            best = EPnPResult(R, t, q, err, N)
    if best is None:
        raise NoValidPoseError("no EPnP candidate places the model in front of the camera")
    # report the error in pixels rather than normalized units
    Pc = Pw @ best.R.T + best.t
    proj = (Pc @ K.T)[:, :2] / Pc[:, 2:3]
    best.reprojection_rms = float(np.sqrt(np.mean(np.sum((proj - uv) ** 2, axis=1))))
    return best


def _visible_pairs(pts3d: KeypointSet3D, pts2d: KeypointSet2D):
    vis = pts2d.visibility
    return pts3d.points[vis], pts2d.points[vis]


def solve_epnp(camera: CameraIntrinsics, pts3d: KeypointSet3D, pts2d: KeypointSet2D) -> Pose:
    """Pose of the model from its visible image keypoints; quaternion has ``w >= 0``."""
    Pw, uv = _visible_pairs(pts3d, pts2d)
    if len(Pw) < 4:
        raise InsufficientCorrespondencesError(
            f"EPnP needs at least 4 visible keypoints, got {len(Pw)}"
        )
    res = epnp(Pw, uv, camera.K)
    return Pose(res.q, res.t)


# ---------------------------------------------------------------------------
# Gauss-Newton polish
# ---------------------------------------------------------------------------


@dataclass
class RefineResult:
    pose: Pose
    rms_history: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    no_progress: bool = False


def _residuals(camera, R, t, Pw, uv):
    Pc = Pw @ R.T + t
    Z = Pc[:, 2]
    u = camera.fpx * Pc[:, 0] / Z + camera.c_x
    v = camera.fpy * Pc[:, 1] / Z + camera.c_y
    return np.column_stack([u, v]) - uv, Pc


def _rms(r: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.sum(r**2, axis=1))))


def refine_gauss_newton(
    camera: CameraIntrinsics,
    pts3d: KeypointSet3D,
    pts2d: KeypointSet2D,
    init: Pose,
    max_iter: int = 20,
    tol: float = 1e-14,
) -> RefineResult:
    """Minimize pixel reprojection error starting from ``init``.

    Rotation updates are applied on the left, ``R <- exp([dw]x) R``.  Steps
    that would raise the RMS are halved (up to 30 times); the RMS history is
    therefore non-increasing.
    """
    Pw, uv = _visible_pairs(pts3d, pts2d)
    R = init.R
    t = init.t.copy()
    q = init.q.copy()
    r, Pc = _residuals(camera, R, t, Pw, uv)
    if np.any(Pc[:, 2] <= 0) or not np.all(np.isfinite(r)):
        return RefineResult(init, [float("inf")], 0, False, True)
    rms = _rms(r)
    out = RefineResult(init, [rms])

    for it in range(1, max_iter + 1):
        X, Y, Z = Pc.T
        J = np.zeros((2 * len(Pw), 6))
        du_dP = np.zeros((len(Pw), 2, 3))
        du_dP[:, 0, 0] = camera.fpx / Z
        du_dP[:, 0, 2] = -camera.fpx * X / Z**2
        du_dP[:, 1, 1] = camera.fpy / Z
        du_dP[:, 1, 2] = -camera.fpy * Y / Z**2
        RX = Pc - t
        # d(exp([w]x) R X)/dw at w=0 is -[RX]x
        skew = np.zeros((len(Pw), 3, 3))
        skew[:, 0, 1], skew[:, 0, 2] = RX[:, 2], -RX[:, 1]
        skew[:, 1, 0], skew[:, 1, 2] = -RX[:, 2], RX[:, 0]
        skew[:, 2, 0], skew[:, 2, 1] = RX[:, 1], -RX[:, 0]
        J[:, :3] = np.einsum("nij,njk->nik", du_dP, skew).reshape(-1, 3)
        J[:, 3:] = du_dP.reshape(-1, 3)
        H = J.T @ J
        g = J.T @ r.reshape(-1)
        if np.linalg.cond(H) > 1e14:
            out.no_progress = True
            break
        delta = -np.linalg.solve(H, g)

        step = 1.0
        accepted = False
        for _ in range(30):
            dw = step * delta[:3]
            ang = np.linalg.norm(dw)
            dq = quat_from_axis_angle(dw, ang) if ang > 0 else np.array([1.0, 0, 0, 0])
            q_new = canonical_quaternion(quat_multiply(dq, q))
            t_new = t + step * delta[3:]
            R_new = quat_to_rotmat(q_new)
            r_new, Pc_new = _residuals(camera, R_new, t_new, Pw, uv)
            if np.all(Pc_new[:, 2] > 0):
                rms_new = _rms(r_new)
                if rms_new <= rms:
                    accepted = True
                    break
            step *= 0.5
        out.iterations = it
        if not accepted:
            out.converged = True
            break
        gain = rms - rms_new
        q, t, R, r, Pc, rms = q_new, t_new, R_new, r_new, Pc_new, rms_new
        out.rms_history.append(rms)
        if gain <= tol * max(rms, 1.0) or np.linalg.norm(step * delta) < 1e-15:
            out.converged = True
            break

    out.pose = Pose(canonical_quaternion(q), t)
    if out.no_progress and out.iterations == 0:
        out.pose = init
    return out
