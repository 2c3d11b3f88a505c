import sys
import math
from pathlib import Path

import numpy as np
import pytest

from fusioncert.config import SmoothingConfig
from fusioncert.detector import Detection
from fusioncert.geometry import Box3D
from fusioncert.scene import Scene, SceneSpec, generate

ROOT = Path(__file__).resolve().parent
ECHO_DETECTOR = ROOT / "testdata" / "echo_detector.py"
GOLDEN_DETECTIONS = ROOT / "testdata" / "golden_detections.json"


def pytest_addoption(parser):
    parser.addoption("--update-golden", action="store_true", default=False,
                     help="rewrite testdata/golden_detections.json from the current builtin detector")


def echo_command(mode: str = "ok", box=None) -> list[str]:
    command = [sys.executable, str(ECHO_DETECTOR), mode]
    if box is not None:
        command.append(str(list(box)))
    return command


class ConstantDetector:
    """Same car detection for every input."""

    serial = False

    def __init__(self, score: float = 0.9, box: Box3D = None, label: str = "car"):
        self.score = score
        self.box = box or Box3D(0.0, 1.65, 10.0, 1.8, 1.5, 4.0, 0.0)
        self.label = label

    def detect(self, scene: Scene) -> list[Detection]:
        return [Detection(self.box, self.label, self.score)]


class GroundTruthDetector:
    """Reports the scene's own (possibly transformed) ground truth, optionally offset in x."""

    serial = False

    def __init__(self, dx: float = 0.0, score: float = 0.9):
        self.dx = dx
        self.score = score

    def detect(self, scene: Scene) -> list[Detection]:
        gt = scene.gt
        box = Box3D(gt.x + self.dx, gt.y, gt.z, gt.w, gt.h, gt.l, gt.r)
        return [Detection(box, "car", self.score)]


class BlindDetector:
    serial = False

    def detect(self, scene: Scene) -> list[Detection]:
        return []


class Receding:
    """Confidence falls off as the vehicle moves away from ``z0``; ignores noise."""

    serial = False

    def __init__(self, z0: float, slope: float = 0.05):
        self.z0 = z0
        self.slope = slope

    def detect(self, scene: Scene) -> list[Detection]:
        score = max(0.0, min(1.0, 0.95 - self.slope * abs(scene.gt.z - self.z0)))
        return [Detection(scene.gt, "car", score)]


@pytest.fixture(scope="session")
def golden_scene() -> Scene:
    return generate(SceneSpec(seed=0))


@pytest.fixture(scope="session")
def small_scene() -> Scene:
    return generate(SceneSpec(vehicle_points=200, background_points=300, seed=1))


@pytest.fixture(scope="session")
def cube_scene() -> Scene:
    return generate(SceneSpec(vehicle_w=1.0, vehicle_h=1.0, vehicle_l=1.0, vehicle_points=60,
                              background_points=60, seed=2))


@pytest.fixture
def single_point_scene() -> Scene:
    camera = SceneSpec().camera()
    return Scene(
        image=np.zeros((camera.height, camera.width)),
        points=np.zeros((1, 3)),
        object_mask=np.array([0]),
        gt=Box3D(0.0, 0.5, 0.0, 1.0, 1.0, 1.0, 0.0),
        camera=camera,
    )


@pytest.fixture
def loose_cfg() -> SmoothingConfig:
    """Wide noise so interpolation errors never block certification."""
    return SmoothingConfig(sigma_x=100.0, sigma_p=100.0, n=60, alpha=0.05, seed=3)


@pytest.fixture
def one_degree() -> float:
    return math.radians(1.0)
