import numpy as np
import pytest

from patchvo.geometry import CameraModel, Intrinsics
from patchvo.oracle import SceneConfig, generate_scene


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(SceneConfig(landmarks=1500, frames=14, seed=3))


@pytest.fixture(scope="session")
def line_scene():
    """Default-size straight-line scene, 50 frames."""
    return generate_scene(SceneConfig())


@pytest.fixture
def cam():
    return CameraModel(Intrinsics(100.0, 100.0, 50.0, 50.0), 100, 100)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
