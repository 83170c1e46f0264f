import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from splitsmc import ou_model, simulate_path

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

OU_A = np.array([[-0.5, 0.4], [-0.3, -0.6]])
OU_SIGMA = np.array([[0.6, 0.0], [0.2, 0.5]])


@pytest.fixture(scope="session")
def ou():
    return ou_model(OU_A, OU_SIGMA)


@pytest.fixture(scope="session")
def ou_data(ou):
    """Observed first coordinate of an OU path, M = 25 at step 0.2."""
    path = simulate_path(ou, "lt", [0.3, -0.2], 0.2, 25, 1, np.random.default_rng(11))
    return path.states[:, [0]]


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
