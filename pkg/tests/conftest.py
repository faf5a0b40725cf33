import numpy as np
import pytest
from hypothesis import settings

from gspretrain.config import fixture_config
from gspretrain.geometry import Camera

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_camera(rng, width=64, height=48):
    """Camera with random intrinsics and a random rigid pose."""
    f = rng.uniform(20, 200, size=2)
    K = [[f[0], 0, rng.uniform(0, width)], [0, f[1], rng.uniform(0, height)], [0, 0, 1]]
    A = rng.normal(size=(3, 3))
    Q, R_ = np.linalg.qr(A)
    Q = Q * np.sign(np.diag(R_))
    if np.linalg.det(Q) < 0:
        Q[:, 0] *= -1
    return Camera(K, Q, rng.normal(size=3), width, height)


def simple_camera(f=100.0, c=32.0, size=64):
    return Camera([[f, 0, c], [0, f, c], [0, 0, 1]], np.eye(3), np.zeros(3), size, size)


@pytest.fixture(scope="session")
def fixture_cfg():
    return fixture_config()


@pytest.fixture(scope="session")
def fixture_ctx(fixture_cfg):
    from gspretrain.train import FrameContext

    return FrameContext.build(fixture_cfg)


ACCEPTANCE = []  # (number, title, passed, detail), filled by test_acceptance


@pytest.fixture
def acceptance():
    def record(number, title, passed, detail=""):
        ACCEPTANCE.append((number, title, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {number}. {title}: {detail}")
