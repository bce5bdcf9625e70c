import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ivba.geometry import CameraIntrinsics, Pose, exp_map

settings.register_profile("ivba", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ivba")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def intr() -> CameraIntrinsics:
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=320.0, cy=240.0, baseline=0.1,
                            image_width=640, image_height=480)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


def random_pose(rng: np.random.Generator, t_scale: float = 1.0, r_scale: float = 0.5) -> Pose:
    return exp_map(np.r_[rng.normal(0, t_scale, 3), rng.normal(0, r_scale, 3)])
