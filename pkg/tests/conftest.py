import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from semfuse.camera import CameraIntrinsics
from semfuse.scene import RoomSpec, generate_room

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def room():
    return generate_room(RoomSpec(n_chairs=2, n_tables=1, seed=7))


@pytest.fixture(scope="session")
def small_K():
    return CameraIntrinsics.default(80, 60)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
