import numpy as np
import pytest

from geoext import builtin
from geoext.chaplygin import build_structure


@pytest.fixture(scope="session")
def particle():
    return builtin("particle", rho="y")


@pytest.fixture(scope="session")
def particle_structure(particle):
    return build_structure(particle)


@pytest.fixture(scope="session")
def carriage():
    return builtin("carriage")


@pytest.fixture(scope="session")
def carriage_structure(carriage):
    return build_structure(carriage)


@pytest.fixture(scope="session")
def r4math():
    return builtin("r4math")


@pytest.fixture(scope="session")
def r4math_structure(r4math):
    return build_structure(r4math)


@pytest.fixture(scope="session")
def r4math_eps1():
    return builtin("r4math", eps=1.0)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)


def pytest_runtest_logreport(report):
    """One always-visible pass/fail line per acceptance criterion test."""
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::", 1)[1]
    verdict = "PASS" if report.passed else "FAIL"
    import sys
    sys.stderr.write(f"\nACCEPTANCE {name}: {verdict}\n")
