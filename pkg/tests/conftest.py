import numpy as np
import pytest

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

from splatnav.rasterizer import CameraModel, Pose, render
from splatnav.splat_scene import random_cloud


@pytest.fixture(scope="session")
def camera():
    return CameraModel()


@pytest.fixture(scope="session")
def small_cloud():
    return random_cloud(200, np.random.default_rng(7))


@pytest.fixture(scope="session", autouse=True)
def warm_jit(camera):
    """Compile the numba kernels once so individual tests time only real work."""
    cloud = random_cloud(8, np.random.default_rng(0))
    pose = Pose(np.array([0.5, 0.5, -0.5, 0.5]), np.array([0.0, 0.0, 1.0]))
    render(cloud, camera, pose, mode="rgbd", binning="square")
    render(cloud, camera, pose, binning="exact")


def look_along_x(position) -> Pose:
    """World-to-camera pose for a camera at `position` looking down +x (z-up world)."""
    return Pose(np.array([0.5, 0.5, -0.5, 0.5]), np.asarray(position, dtype=float))
