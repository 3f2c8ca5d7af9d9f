import numpy as np
import pytest
from hypothesis import settings

from dfdi.dynamics import SpacecraftParams

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def params():
    return SpacecraftParams()


@pytest.fixture
def short_params():
    """Coarse, short grid for fast simulation tests."""
    return SpacecraftParams(dt=0.05, horizon=2.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
