import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_scene():
    """Ground-truth grid and 8 posed 32x32 views, shared by the cheaper tests."""
    from cascade_ba.problem import RigParams, synthesize

    return synthesize(0, RigParams(n_views=8, width=32, height=32))


@pytest.fixture(scope="session")
def desk_scene():
    """The standard 20-view 64x64 rig on seed 0."""
    from cascade_ba.problem import synthesize

    return synthesize(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
