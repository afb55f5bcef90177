import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hardballs.core import PhasePoint, make_system

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

S = 1 / math.sqrt(2)


@pytest.fixture
def pair_params():
    return make_system(2, 2, (1.0, 1.0), 0.1)


@pytest.fixture
def head_on(pair_params):
    """Equal balls on a horizontal line moving towards each other."""
    return PhasePoint(np.array([[0.25, 0.5], [0.75, 0.5]]), np.array([[S, 0.0], [-S, 0.0]]))


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
