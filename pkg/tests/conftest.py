import numpy as np
import pytest

from sensorplace.fem import SensitivityBasis, forward


@pytest.fixture(scope="session")
def fwd5():
    return forward(5)


@pytest.fixture(scope="session")
def fwd9():
    return forward(9)


def toy_basis(values, points=None) -> SensitivityBasis:
    v = np.atleast_2d(np.asarray(values, dtype=float))
    if v.shape[0] == 1 and np.ndim(values) == 1:
        v = v.T
    if points is None:
        points = np.column_stack([np.linspace(0.0, 1.0, len(v)), np.zeros(len(v))])
    return SensitivityBasis(v, points)


def random_pd(rng, n, shift=0.5):
    A = rng.standard_normal((n, n))
    return A @ A.T + shift * np.eye(n)


ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
