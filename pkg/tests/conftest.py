import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nlrs.solver import Schedule, solve
from nlrs.spectral import UNIFORM, Box1D, DistributionSpec, diagonalize, sample_potential, select_modes

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

UNIFORM_SPEC = DistributionSpec(UNIFORM)


def sample(radius, seed):
    return sample_potential(UNIFORM_SPEC, Box1D.centered(radius), seed)


@pytest.fixture(scope="session")
def two_mode():
    """Seed 0 on [-128, 128] with modes near -90 and 90, solved at delta = 1e-3."""
    V = sample(128, 0)
    eig = diagonalize(V)
    sel = select_modes(eig, [-90, 90], 8, [1.5, 1.3])
    cert = solve(eig, sel, 1e-3, 1, Schedule(initial_radius=4))
    return V, eig, sel, cert


@pytest.fixture(scope="session")
def one_mode():
    """Seed 0 on [-64, 64] with one mode near 50, solved at delta = 1e-3."""
    V = sample(64, 0)
    eig = diagonalize(V)
    sel = select_modes(eig, [50], 4, [1.5])
    cert = solve(eig, sel, 1e-3, 1)
    return V, eig, sel, cert


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
