import numpy as np
import pytest

from promptseg import kernels

BACKENDS = ["numpy"] + (["numba"] if kernels.NUMBA_AVAILABLE else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    """Run the test once per kernel backend, restoring the previous one afterwards."""
    before = kernels.backend()
    kernels.use_numba(request.param == "numba")
    yield request.param
    kernels.use_numba(before == "numba")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
