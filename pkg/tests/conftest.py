import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from berknash.examples_registry import EffortTaskSpec, build_effort_task, effort_task_closed_form

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], max_examples=100
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def effort_spec():
    return EffortTaskSpec(c=0.45, q0=0.3, q1=0.6)


@pytest.fixture(scope="session")
def effort(effort_spec):
    return build_effort_task(effort_spec)


@pytest.fixture(scope="session")
def effort_eq(effort_spec):
    return effort_task_closed_form(effort_spec)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
