import numpy as np
import pytest

from svitv.fields import Constant, Rotation2D, make_field
from svitv.geometry import build_polar_disk, build_torus


@pytest.fixture(scope="session")
def torus32():
    return build_torus(2, (32, 32), (1.0, 1.0))


@pytest.fixture(scope="session")
def disk32():
    return build_polar_disk(1.0, 32, 64)


@pytest.fixture(scope="session")
def rotation(disk32):
    return make_field(Rotation2D(), disk32)


@pytest.fixture(scope="session")
def shift(torus32):
    return make_field(Constant((0.7, -0.3)), torus32)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def bump(grid, center=(0.4, 0.0), width=0.05):
    x, y = grid.coords
    return np.exp(-((x - center[0]) ** 2 + (y - center[1]) ** 2) / width)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, pass or fail."""
    lines = {}
    for status in ("passed", "failed"):
        for rep in terminalreporter.stats.get(status, []):
            if rep.when != "call" or "test_acceptance.py::test_criterion_" not in rep.nodeid:
                continue
            num = int(rep.nodeid.split("test_criterion_")[1].split("_")[0])
            detail = dict(rep.user_properties).get("detail", "")
            lines[num] = f"criterion {num:2d}: {status.upper()[:4]}  {detail}"
    if lines:
        terminalreporter.section("acceptance criteria")
        for num in sorted(lines):
            terminalreporter.write_line(lines[num])
