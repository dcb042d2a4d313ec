import numpy as np
import pytest

from demoseg import kernels


@pytest.fixture(params=["numba", "numpy"])
def kernel_path(request, monkeypatch):
    """Run a test once per kernel table."""
    table = kernels.NUMBA if request.param == "numba" else kernels.NUMPY
    monkeypatch.setattr(kernels, "_ACTIVE", table)
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
