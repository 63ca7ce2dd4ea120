import numpy as np
import pytest
from hypothesis import settings

from robustopt.problems import make_logistic, make_quadratic

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def spd(rng, d, lo=1.0, hi=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return Q @ np.diag(np.linspace(lo, hi, d)) @ Q.T


def fd_grad(fun, x, h=1e-6):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def quad_clients(rng):
    """Eight quadratics sharing a Hessian with spread-out linear terms."""
    d = 5
    A = spd(rng, d, 1.0, 10.0)
    return [make_quadratic(A, rng.standard_normal(d)) for _ in range(8)]


@pytest.fixture
def logistic_loss(rng):
    X = rng.standard_normal((80, 4))
    y = np.where(X @ np.ones(4) + 0.3 * rng.standard_normal(80) > 0, 1.0, -1.0)
    return make_logistic(X, y, 0.1)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
