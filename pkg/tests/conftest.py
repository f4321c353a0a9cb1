import numpy as np
import pytest

from cryorient.simulate import make_phantom


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_quats(rng, n):
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


@pytest.fixture(scope="session")
def asym32():
    return make_phantom("asymmetric-blobs", 32, seed=2)


# one line per acceptance criterion, printed at the end of the run
CRITERIA: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[k])
