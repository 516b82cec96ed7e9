import numpy as np
import pytest

from pgsmooth import data_io
from pgsmooth.rk_basis import NodeGrid, assemble_basis


@pytest.fixture(scope="session")
def grid():
    return NodeGrid.uniform((21, 21), (10, 10), spacing=0.25)


@pytest.fixture(scope="session")
def basis(grid):
    return assemble_basis(grid, 3.1 * grid.center_spacing, 1)


@pytest.fixture(scope="session")
def artifact():
    """One default artifact sample: (grid, sample, truth)."""
    return data_io.generate_synthetic(data_io.artifact_spec(3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from oracles import ACCEPTANCE
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
