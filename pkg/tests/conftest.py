import numpy as np
import pytest

from cfachi.model import population_model, implied_covariance

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def population():
    model, theta = population_model()
    return model, theta, implied_covariance(model, theta)


def random_spd(rng, p, scale=1.0):
    A = rng.normal(size=(p, p))
    S = A @ A.T / p + np.eye(p) * 0.5
    D = np.diag(rng.uniform(0.5, 2.0, p)) * scale
    S = D @ S @ D
    return 0.5 * (S + S.T)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
