import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ebm_lifecycle.toydata import frozen_generator_fixture, load_dataset

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def double_well():
    return load_dataset("double-well-1d")


@pytest.fixture(scope="session")
def ring():
    return load_dataset("ring-4-2d")


@pytest.fixture(scope="session")
def ring_generator(ring):
    return frozen_generator_fixture(ring, 300, np.random.default_rng(0))


@pytest.fixture(scope="session")
def double_well_generator(double_well):
    return frozen_generator_fixture(double_well, 300, np.random.default_rng(0))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one acceptance line; it is printed now and again in the terminal summary."""
    def _report(name: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok
    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
