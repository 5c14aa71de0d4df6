import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sograb.alignment import RigidTransform, axis_angle  # noqa: E402
from sograb.pointcloud import PointCloud  # noqa: E402
from sograb.synth import ShapeSpec, sample_shape  # noqa: E402

# filled by test_acceptance; printed after the run
ACCEPTANCE_RESULTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k.split()[0][2:])):
        ok, detail = ACCEPTANCE_RESULTS[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def box_cloud():
    return sample_shape(ShapeSpec("box", (0.055, 0.04, 0.03), 2000, seed=3))


@pytest.fixture
def skewed_cloud():
    """Asymmetric blob with clearly separated principal variances."""
    g = np.random.default_rng(99).normal(size=(1500, 3))
    pts = np.column_stack([0.03 * g[:, 0] + 0.01 * g[:, 0] ** 2, 0.015 * g[:, 1], 0.006 * g[:, 2] ** 3])
    return PointCloud(pts)


@pytest.fixture
def known_motion():
    return RigidTransform(axis_angle([1.0, 2.0, 3.0], np.radians(20)), [0.03, -0.01, 0.02])
