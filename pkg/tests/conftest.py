import numpy as np
import pytest

from xseason.geometry import CameraView, rotation_to_quaternion

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_rotation(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def make_view(view_id="v0", traversal="ref", q=(1, 0, 0, 0), t=(0, 0, 0), f=100.0,
              cx=50.0, cy=50.0, width=100, height=100):
    return CameraView(view_id, traversal, f"{view_id}.png", tuple(q), tuple(t), f, f, cx, cy,
                      width, height)


def random_view(rng, view_id="v0", traversal="ref"):
    return make_view(view_id, traversal, q=random_rotation(rng), t=rng.uniform(-5, 5, 3),
                     f=rng.uniform(50, 300), cx=rng.uniform(20, 80), cy=rng.uniform(20, 80))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
