import numpy as np
import pytest

from nonlocal_design import build_interval_mesh, disk_mesh_for_dofs, extend_with_horizon

# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def line16():
    return build_interval_mesh(0.0, 1.0, 16)


@pytest.fixture(scope="session")
def line16_ext(line16):
    return extend_with_horizon(line16, 0.25)


@pytest.fixture(scope="session")
def disk25():
    return disk_mesh_for_dofs(1.0, 25)


@pytest.fixture(scope="session")
def disk25_ext(disk25):
    return extend_with_horizon(disk25, 0.3)
