import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from viewplan.geometry import CameraIntrinsics, CameraPose, VoxelGrid  # noqa: E402


@pytest.fixture
def intr():
    return CameraIntrinsics.from_fov(32, 32, 60.0)


@pytest.fixture
def unit_grid():
    return VoxelGrid(np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))


def random_pose(rng, radius=3.0):
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    return CameraPose.look_at(radius * d, rng.uniform(-0.3, 0.3, 3))


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record ``(number, passed, detail)`` for the end-of-run acceptance table."""
    def record(number, passed, detail=""):
        _CRITERIA[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
