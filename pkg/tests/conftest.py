import numpy as np
import pytest

from polybous.boussinesq import SimParams
from polybous.domain import mesh_polygon, preset

OMEGA_B = "sin(2*pi*x)*sin(2*pi*y)"
THETA_B = "sin(pi*x)*sin(pi*y)"


def square_mesh(n):
    return mesh_polygon(preset("unit_square"), divisions=n)


def scenario_b(n, **overrides):
    """Benchmark: unit square, nu = 0, t_end = 1, cfl = 0.5, dt_max = 1/n."""
    kw = dict(nu=0.0, t_end=1.0, dt_max=1.0 / n, cfl=0.5, omega0=OMEGA_B, theta0=THETA_B, eta=0.0)
    kw.update(overrides)
    return SimParams(**kw)


@pytest.fixture(scope="session")
def mesh16():
    return square_mesh(16)


@pytest.fixture(scope="session")
def mesh32():
    return square_mesh(32)


@pytest.fixture(scope="session")
def tri16():
    return mesh_polygon(preset("right_triangle"), divisions=16)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


def record_criterion(number, passed, text):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {text}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
