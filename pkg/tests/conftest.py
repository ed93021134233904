import numpy as np
import pytest

from sparse_smpc.config import ExperimentConfig
from sparse_smpc.conic import BACKENDS


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def reference_config():
    return ExperimentConfig()


@pytest.fixture(params=[(b, nq) for b in BACKENDS for nq in (True, False)],
                ids=lambda p: f"{p[0]}-{'qp' if p[1] else 'epigraph'}")
def solver_setup(request):
    backend, native = request.param
    return {"backend": backend, "native_quadratic": native}


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
