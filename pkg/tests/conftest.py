import numpy as np
import pytest
from hypothesis import settings

from weakgmm.model import IvDesign, homoskedastic_omega

ACCEPTANCE_LINES: dict = {}

settings.register_profile("repro", derandomize=True)
settings.load_profile("repro")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


def make_design(k=1, pi=1.0, theta_star=0.5, omega=None, su2=1.0, sv2=1.0, suv=0.0, bounds=(-10.0, 10.0),
                qzz_inv=None, se_ref=1.0, id="test"):
    if omega is None:
        omega = np.eye(2 * k)
    return IvDesign(id, k, pi * np.ones(k), theta_star, omega, su2, sv2, suv, se_ref, bounds, qzz_inv)


def random_pd(rng, n, ridge=0.5):
    A = rng.standard_normal((n, n))
    return A @ A.T / n + ridge * np.eye(n)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def unit_design():
    return make_design()


@pytest.fixture
def homo_design():
    Q = np.array([[1.0, 0.3, 0.1], [0.3, 1.2, 0.2], [0.1, 0.2, 0.9]])
    return IvDesign("homo3", 3, np.array([0.4, 0.2, 0.3]), 0.7, homoskedastic_omega(1.5, 1.0, 0.6, Q),
                    1.5, 1.0, 0.6, 1.0, (-12.0, 12.0), np.linalg.inv(Q))
