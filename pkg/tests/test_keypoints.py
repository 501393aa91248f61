import numpy as np
import pytest

from conftest import orbit_poses
from spacepose.errors import DegenerateGeometryError, InvalidInputError, UnobservablePointError
from spacepose.geometry import PRISMA_CAMERA, TANGO_KEYPOINTS, KeypointSet3D, Pose, project_points, random_quaternion
from spacepose.keypoints import (
    Observation,
    load_picks,
    recover_keypoints,
    report_to_csv,
    reprojection_report,
    save_picks,
)


def observe(poses, model=TANGO_KEYPOINTS, noise=0.0, rng=None, offset=(0.0, 0.0)):
    out = []
    for j, pose in enumerate(poses):
        uv = project_points(PRISMA_CAMERA, pose, model.points) + np.asarray(offset)
        if noise:
            uv = uv + rng.normal(0, noise, uv.shape)
        out.append(Observation(j, pose, {k: tuple(p) for k, p in enumerate(uv)}))
    return out


def test_noiseless_exact():
    poses = orbit_poses(np.random.default_rng(20), 12)
    sol = recover_keypoints(PRISMA_CAMERA, observe(poses))
    assert np.abs(sol.points3d.points - TANGO_KEYPOINTS.points).max() < 1e-6
    assert sol.residual < 1e-6


def test_scales_are_depths():
    poses = orbit_poses(np.random.default_rng(21), 12)
    sol = recover_keypoints(PRISMA_CAMERA, observe(poses))
    assert np.all(sol.scales > 0)
    for j, p in enumerate(poses):
        np.testing.assert_allclose(sol.scales[j], p.transform(TANGO_KEYPOINTS.points)[:, 2], rtol=1e-9)


def test_noisy_residual_near_noise_level():
    rng = np.random.default_rng(22)
    sigma = 0.5
    for _ in range(10):
        sol = recover_keypoints(PRISMA_CAMERA, observe(orbit_poses(rng, 12), noise=sigma, rng=rng))
        err = np.linalg.norm(sol.points3d.points - TANGO_KEYPOINTS.points, axis=1)
        assert err.mean() < 0.01
        assert 0 <= sol.residual < 3 * sigma


def test_single_view_unobservable():
    obs = observe(orbit_poses(np.random.default_rng(23), 3))
    for o in obs[1:]:
        del o.picks[4]
    with pytest.raises(UnobservablePointError) as e:
        recover_keypoints(PRISMA_CAMERA, obs)
    assert e.value.index == 4


def test_identical_views_degenerate():
    pose = Pose([1, 0, 0, 0], [0, 0, 10])
    with pytest.raises(DegenerateGeometryError):
        recover_keypoints(PRISMA_CAMERA, observe([pose, pose]))


def test_observation_validation():
    with pytest.raises(InvalidInputError):
        Observation(0, Pose.identity(), {})
    with pytest.raises(InvalidInputError):
        Observation(0, Pose.identity(), {11: (0, 0)})


def test_equivariance_under_rigid_transform():
    rng = np.random.default_rng(24)
    poses = orbit_poses(rng, 12)
    g = Pose(random_quaternion(rng), rng.normal(size=3) * 0.3)
    moved = KeypointSet3D(g.transform(TANGO_KEYPOINTS.points))
    # the same images seen with the body frame moved by g
    poses_g = [p.compose(g.inverse()) for p in poses]
    sol = recover_keypoints(PRISMA_CAMERA, observe(poses_g, moved))
    assert np.abs(sol.points3d.points - moved.points).max() < 1e-6


def test_redundant_observation_does_not_raise_residual():
    rng = np.random.default_rng(25)
    obs = observe(orbit_poses(rng, 6), noise=0.5, rng=rng)
    base = recover_keypoints(PRISMA_CAMERA, obs)
    # an extra view whose picks agree exactly with the current estimate
    extra = orbit_poses(rng, 1)[0]
    uv = project_points(PRISMA_CAMERA, extra, base.points3d.points)
    more = recover_keypoints(PRISMA_CAMERA, obs + [Observation(99, extra, {k: tuple(p) for k, p in enumerate(uv)})])
    assert np.all(more.per_point_residual <= base.per_point_residual + 1e-9)
    np.testing.assert_allclose(more.points3d.points, base.points3d.points, atol=1e-9)


def test_partial_visibility():
    rng = np.random.default_rng(26)
    obs = observe(orbit_poses(rng, 12))
    for j, o in enumerate(obs):
        for k in list(o.picks):
            if (j + k) % 3 == 0:
                del o.picks[k]
    sol = recover_keypoints(PRISMA_CAMERA, obs)
    assert np.abs(sol.points3d.points - TANGO_KEYPOINTS.points).max() < 1e-6
    assert np.isnan(sol.scales[0, 0]) and sol.scales[0, 1] > 0


def test_report_zero_for_exact_solution():
    poses = orbit_poses(np.random.default_rng(27), 20)
    rows = reprojection_report(PRISMA_CAMERA, TANGO_KEYPOINTS, TANGO_KEYPOINTS, poses)
    assert all(r.mean_error_px == 0 for r in rows if r.count)
    assert sum(r.count for r in rows) == 20


def test_report_offset_picks():
    rng = np.random.default_rng(28)
    sol = recover_keypoints(PRISMA_CAMERA, observe(orbit_poses(rng, 12), offset=(1.0, 0.0)))
    eval_poses = orbit_poses(rng, 200)
    rows = [r for r in reprojection_report(PRISMA_CAMERA, sol, TANGO_KEYPOINTS, eval_poses) if r.count >= 10]
    errs = np.array([r.mean_error_px for r in rows])
    assert np.all(errs > 0.1)
    assert errs.max() / errs.min() < 3


def test_report_empty_and_csv():
    with pytest.raises(InvalidInputError):
        reprojection_report(PRISMA_CAMERA, TANGO_KEYPOINTS, TANGO_KEYPOINTS, [])
    rows = reprojection_report(PRISMA_CAMERA, TANGO_KEYPOINTS, TANGO_KEYPOINTS, [Pose([1, 0, 0, 0], [0, 0, 10.5])])
    text = report_to_csv(rows)
    assert text.splitlines()[0] == "range_lo_m,range_hi_m,count,mean_reprojection_error_px"
    assert text.splitlines()[1] == "10.0,11.0,1,0.0"


def test_picks_round_trip(tmp_path):
    obs = observe(orbit_poses(np.random.default_rng(29), 3))
    save_picks(tmp_path / "p.json", obs)
    back = load_picks(tmp_path / "p.json")
    assert [o.image_id for o in back] == [0, 1, 2]
    for a, b in zip(obs, back):
        np.testing.assert_array_equal(a.pose.q, b.pose.q)
        assert a.picks.keys() == b.picks.keys()
        for k in a.picks:
            np.testing.assert_array_equal(a.picks[k], b.picks[k])
