import numpy as np
import pytest

from spacepose.dataset import PoseDistribution, sample_pose
from spacepose.geometry import PRISMA_CAMERA, TANGO_KEYPOINTS, Pose, project_points, random_quaternion


@pytest.fixture
def camera():
    return PRISMA_CAMERA


@pytest.fixture
def model():
    return TANGO_KEYPOINTS


def front_pose(rng, range_m=None, lo=3.0, hi=30.0):
    """Random attitude with the target in front of the camera near the boresight."""
    if range_m is not None:
        lo = hi = range_m
    return sample_pose(rng, PRISMA_CAMERA, PoseDistribution(lo, hi, center_fraction=0.5))


def orbit_poses(rng, n, range_m=10.0):
    """Poses whose camera centers are spread around the target."""
    out = []
    for _ in range(n):
        q = random_quaternion(rng)
        out.append(Pose(q, [rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), range_m * rng.uniform(0.7, 1.3)]))
    return out


def exact_pixels(pose, pts=None):
    return project_points(PRISMA_CAMERA, pose, TANGO_KEYPOINTS.points if pts is None else pts)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
