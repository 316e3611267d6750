import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from wavemo.optics import pupil_mask  # noqa: E402
from wavemo.zernike import GridSpec, build_basis  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small():
    """16 px grid, full 28-mode basis and pupil mask."""
    grid = GridSpec(16, 0.5)
    return grid, build_basis(grid), pupil_mask(grid)


@pytest.fixture(scope="session")
def tiny():
    grid = GridSpec(8, 0.5)
    return grid, build_basis(grid), pupil_mask(grid)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
