import json
from pathlib import Path

import numpy as np
import pytest

from densemap.geometry import PinholeCamera, SE3Pose, quat_to_matrix


def random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    return quat_to_matrix(q / np.linalg.norm(q))


def random_pose(rng, t_scale=1.0) -> SE3Pose:
    return SE3Pose.from_matrix(random_rotation(rng), rng.normal(0, t_scale, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def cam100():
    """fx = fy = 100, principal point (50, 50), 101 x 101 image."""
    return PinholeCamera(100.0, 100.0, 50.0, 50.0, 101, 101)


def write_manifest(path: Path, doc: dict) -> Path:
    path.write_text(json.dumps(doc, indent=1))
    return path


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
