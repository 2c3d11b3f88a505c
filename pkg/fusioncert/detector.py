"""Detector contract g(image, points) -> [(box, label, score)] and two implementations.

``BuiltinDetector`` is a deterministic geometric pipeline (ground removal,
grid clustering, principal-axis box fit). ``ExternalDetector`` talks to a
child process over JSON lines:

    child -> {"protocol": "commit-detector", "version": 1}      (first line)
    parent -> {"image": [[...]], "points": [[x, y, z], ...]}
    child -> {"detections": [{"box": [x, y, z, w, h, l, r], "label": "car", "score": 0.9}]}
"""

import json
import math
import queue
import logging
import subprocess
import threading
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from scipy import ndimage
from scipy.special import expit

from fusioncert.config import BuiltinDetectorConfig, DetectorSpec
from fusioncert.defaults import PROTOCOL_NAME, PROTOCOL_VERSION, VEHICLE_LABELS
from fusioncert.errors import (
    DetectorError,
    DetectorProcessDied,
    DetectorProtocolError,
    DetectorTimeoutError,
    InputError,
)
from fusioncert.geometry import Box3D
from fusioncert.scene import Camera, Scene, SceneSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Detection:
    box: Box3D
    label: str
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise InputError(f"detection.score: must lie in [0, 1], got {self.score}")

    def as_dict(self) -> dict:
        return {"box": list(self.box.as_array()), "label": self.label, "score": self.score}


def top_vehicle_confidence(detections: Sequence[Detection]) -> float:
    scores = [d.score for d in detections if d.label in VEHICLE_LABELS]
    return max(scores) if scores else 0.0


def top_vehicle_box_statistics(detections: Sequence[Detection]) -> Optional[np.ndarray]:
    best = None
    for d in detections:
        if d.label in VEHICLE_LABELS and (best is None or d.score > best.score):
            best = d
    return None if best is None else best.box.as_array()


def box_from_statistics(values: np.ndarray) -> Optional[Box3D]:
    """Box from a smoothed 7-vector; None when a coordinate is missing or invalid."""
    values = np.asarray(values, dtype=float)
    if values.shape != (7,) or not np.all(np.isfinite(values)):
        return None
    try:
        return Box3D.from_array(values)
    except InputError:
        return None


class BuiltinDetector:
    """Ground removal, x-z grid clustering and a principal-axis box per cluster."""

    serial = False

    def __init__(self, config: Optional[BuiltinDetectorConfig] = None):
        self.config = config or BuiltinDetectorConfig()

    def detect(self, scene: Scene) -> list[Detection]:
        return self.detect_arrays(scene.image, scene.points, scene.camera)

    def detect_arrays(
        self, image: np.ndarray, points: np.ndarray, camera: Optional[Camera] = None
    ) -> list[Detection]:
        cfg = self.config
        camera = camera or SceneSpec().camera()
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if points.shape[0] == 0:
            return []
        ground = _fit_ground(points, cfg)
        keep = np.ones(points.shape[0], dtype=bool)
        if ground is not None:
            keep &= np.abs(points[:, 1] - _plane_y(ground, points[:, 0], points[:, 2])) >= cfg.ground_eps
        keep &= (points[:, 2] > 0) & (points[:, 2] < cfg.max_range) & (np.abs(points[:, 0]) < cfg.max_range)
        candidates = points[keep]
        if candidates.shape[0] < cfg.min_cluster_points:
            return []

        detections = []
        for members in _clusters(candidates[:, [0, 2]], cfg.cell_size):
            if members.size < cfg.min_cluster_points:
                continue
            cluster = candidates[members]
            box = _fit_box(cluster, ground, cfg)
            label = "car" if box.l >= cfg.car_min_length else "pedestrian"
            point_term = 0.0 if cfg.modality == "camera" else cfg.score_a * members.size
            image_term = 0.0 if cfg.modality == "lidar" else cfg.score_b * _patch_intensity(image, cluster, camera)
            score = float(expit(point_term + image_term + cfg.score_c))
            detections.append(Detection(box, label, score))
        detections.sort(key=lambda d: -d.score)
        return detections


def _plane_y(coeffs: np.ndarray, x, z):
    return coeffs[0] * x + coeffs[1] * z + coeffs[2]


def _plane(points: np.ndarray) -> np.ndarray:
    design = np.column_stack([points[:, 0], points[:, 2], np.ones(points.shape[0])])
    coeffs, *_ = np.linalg.lstsq(design, points[:, 1], rcond=None)
    return coeffs


def _fit_ground(points: np.ndarray, cfg: BuiltinDetectorConfig) -> Optional[np.ndarray]:
    """Least-squares plane y = a x + b z + c seeded on the lowest points (largest y)."""
    if points.shape[0] < 3:
        return None
    band = max(3, int(math.ceil(cfg.ground_band * points.shape[0])))
    seed = np.argsort(-points[:, 1], kind="stable")[:band]
    coeffs = _plane(points[seed])
    for _ in range(2):
        inliers = np.abs(points[:, 1] - _plane_y(coeffs, points[:, 0], points[:, 2])) < cfg.ground_eps
        if inliers.sum() < 3:
            break
        coeffs = _plane(points[inliers])
    return coeffs


def _clusters(xz: np.ndarray, cell_size: float) -> list[np.ndarray]:
    origin = xz.min(axis=0)
    ij = np.floor((xz - origin) / cell_size).astype(np.int64)
    shape = tuple(ij.max(axis=0) + 1)
    occupancy = np.zeros(shape, dtype=bool)
    occupancy[ij[:, 0], ij[:, 1]] = True
    labels, count = ndimage.label(occupancy, structure=np.ones((3, 3), dtype=bool))
    point_labels = labels[ij[:, 0], ij[:, 1]]
    return [np.nonzero(point_labels == k)[0] for k in range(1, count + 1)]


def _fit_box(cluster: np.ndarray, ground: Optional[np.ndarray], cfg: BuiltinDetectorConfig) -> Box3D:
    xz = cluster[:, [0, 2]]
    mean = xz.mean(axis=0)
    offsets = xz - mean
    _, vectors = np.linalg.eigh(offsets.T @ offsets)
    dx, dz = vectors[:, -1]
    # The length axis (local z) maps to (-sin r, cos r).
    r = math.atan2(-dx, dz)
    if r <= -math.pi / 2:
        r += math.pi
    elif r > math.pi / 2:
        r -= math.pi
    c, s = math.cos(r), math.sin(r)
    u = c * offsets[:, 0] + s * offsets[:, 1]
    t = -s * offsets[:, 0] + c * offsets[:, 1]
    p_lo, p_hi = cfg.extent_percentiles
    u_lo, u_hi = np.percentile(u, [p_lo, p_hi])
    t_lo, t_hi = np.percentile(t, [p_lo, p_hi])
    u_mid, t_mid = (u_lo + u_hi) / 2.0, (t_lo + t_hi) / 2.0
    x = float(mean[0] + c * u_mid - s * t_mid)
    z = float(mean[1] + s * u_mid + c * t_mid)
    top = float(np.percentile(cluster[:, 1], p_lo))
    bottom = float(_plane_y(ground, x, z)) if ground is not None else float(np.percentile(cluster[:, 1], p_hi))
    return Box3D(
        x,
        bottom,
        z,
        max(float(u_hi - u_lo), cfg.min_size),
        max(bottom - top, cfg.min_size),
        max(float(t_hi - t_lo), cfg.min_size),
        r,
    )


def _patch_intensity(image: np.ndarray, cluster: np.ndarray, camera: Camera) -> float:
    """Mean image intensity over the pixel rectangle spanned by the cluster."""
    front = cluster[cluster[:, 2] > 1e-9]
    if front.shape[0] == 0:
        return 0.0
    u = camera.fx * front[:, 0] / front[:, 2] + camera.cx
    v = camera.fy * front[:, 1] / front[:, 2] + camera.cy
    height, width = image.shape
    u0, u1 = max(0, int(math.floor(u.min()))), min(width, int(math.floor(u.max())) + 1)
    v0, v1 = max(0, int(math.floor(v.min()))), min(height, int(math.floor(v.max())) + 1)
    if u0 >= u1 or v0 >= v1:
        return 0.0
    return float(np.mean(image[v0:v1, u0:u1]))


class _DetectionPayload(BaseModel):
    model_config = ConfigDict(allow_inf_nan=False)

    box: tuple[float, float, float, float, float, float, float]
    label: str
    score: float = Field(ge=0.0, le=1.0)


class _ResponsePayload(BaseModel):
    detections: list[_DetectionPayload]


def _decode_line(line: bytes, offset: int):
    try:
        text = line.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DetectorProtocolError("response is not UTF-8", repr(line), offset + exc.start) from exc
    try:
        return json.loads(text), text
    except json.JSONDecodeError as exc:
        byte_pos = offset + len(text[: exc.pos].encode("utf-8"))
        raise DetectorProtocolError(f"invalid JSON ({exc.msg})", text, byte_pos) from exc


def parse_response(line: bytes, offset: int = 0) -> list[Detection]:
    data, text = _decode_line(line, offset)
    try:
        payload = _ResponsePayload.model_validate(data)
    except ValidationError as exc:
        error = exc.errors()[0]
        where = ".".join(str(p) for p in error["loc"])
        raise DetectorProtocolError(f"{where}: {error['msg']}", text, offset) from exc
    detections = []
    for item in payload.detections:
        try:
            detections.append(Detection(Box3D.from_array(item.box), item.label, item.score))
        except InputError as exc:
            raise DetectorProtocolError(str(exc), text, offset) from exc
    return detections


class ExternalDetector:
    """One child process; requests on a handle are strictly serialized."""

    serial = True

    def __init__(self, command: Sequence[str], timeout: float = 30.0):
        if not command:
            raise InputError("detector.command: required")
        self.command = list(command)
        self.timeout = timeout
        self._lock = threading.Lock()
        self._offset = 0
        self._dead = False
        try:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
            )
        except OSError as exc:
            raise DetectorProcessDied(f"could not start detector {self.command[0]!r}: {exc}") from exc
        self._lines: "queue.Queue[Optional[bytes]]" = queue.Queue()
        threading.Thread(target=self._pump_stdout, daemon=True).start()
        threading.Thread(target=self._pump_stderr, daemon=True).start()
        try:
            self._handshake()
        except DetectorError:
            self.close()
            raise

    def _pump_stdout(self):
        for line in iter(self._proc.stdout.readline, b""):
            self._lines.put(line)
        self._lines.put(None)

    def _pump_stderr(self):
        for line in iter(self._proc.stderr.readline, b""):
            logger.debug("detector stderr: %s", line.decode("utf-8", "replace").rstrip())

    def _read_line(self) -> tuple[bytes, int]:
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            self._dead = True
            self.close()
            raise DetectorTimeoutError(f"no response from detector within {self.timeout} s") from None
        if line is None:
            self._dead = True
            code = self._proc.wait()
            raise DetectorProcessDied(f"detector exited with code {code}")
        start = self._offset
        self._offset += len(line)
        return line, start

    def _handshake(self):
        line, offset = self._read_line()
        data, text = _decode_line(line, offset)
        if not isinstance(data, dict) or data.get("protocol") != PROTOCOL_NAME or data.get("version") != PROTOCOL_VERSION:
            self._dead = True
            raise DetectorProtocolError("unexpected handshake", text, offset)
        logger.info("external detector %s ready", self.command[0])

    @property
    def usable(self) -> bool:
        return not self._dead

    def detect(self, scene: Scene) -> list[Detection]:
        return self.detect_arrays(scene.image, scene.points)

    def detect_arrays(self, image: np.ndarray, points: np.ndarray) -> list[Detection]:
        request = json.dumps({"image": np.asarray(image).tolist(), "points": np.asarray(points).tolist()}) + "\n"
        with self._lock:
            if self._dead:
                raise DetectorProcessDied("detector handle is no longer usable")
            try:
                self._proc.stdin.write(request.encode("utf-8"))
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                self._dead = True
                raise DetectorProcessDied(f"detector closed its input: {exc}") from exc
            line, offset = self._read_line()
        return parse_response(line, offset)

    def close(self):
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
        self._dead = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ExternalDetectorPool:
    """N child processes; each sample borrows one idle handle."""

    serial = False

    def __init__(self, command: Sequence[str], size: int, timeout: float = 30.0):
        if size < 1:
            raise InputError("detector.pool_size: must be >= 1")
        self.handles: list[ExternalDetector] = []
        try:
            for _ in range(size):
                self.handles.append(ExternalDetector(command, timeout))
        except DetectorError:
            self.close()
            raise
        self._idle: "queue.Queue[ExternalDetector]" = queue.Queue()
        for handle in self.handles:
            self._idle.put(handle)

    def detect(self, scene: Scene) -> list[Detection]:
        handle = self._idle.get()
        try:
            return handle.detect(scene)
        finally:
            self._idle.put(handle)

    def close(self):
        for handle in self.handles:
            handle.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


Detector = Union[BuiltinDetector, ExternalDetector, ExternalDetectorPool]


def open_detector(spec: DetectorSpec, builtin: Optional[BuiltinDetectorConfig] = None) -> Detector:
    if spec.kind == "builtin":
        return BuiltinDetector(builtin)
    if spec.pool_size > 1:
        return ExternalDetectorPool(spec.command, spec.pool_size, spec.timeout)
    return ExternalDetector(spec.command, spec.timeout)


def close_detector(detector) -> None:
    close = getattr(detector, "close", None)
    if close is not None:
        close()


class ConfidenceStatistic:
    """Top vehicle score of one noisy scene; 0 when nothing is detected."""

    def __init__(self, detector: Detector):
        self.detector = detector
        self.serial = getattr(detector, "serial", False)

    def __call__(self, scene: Scene) -> float:
        return top_vehicle_confidence(self.detector.detect(scene))


class BoxStatistic:
    """Top vehicle box as a 7-vector; all-NaN when no vehicle is detected."""

    def __init__(self, detector: Detector):
        self.detector = detector
        self.serial = getattr(detector, "serial", False)

    def __call__(self, scene: Scene) -> np.ndarray:
        box = top_vehicle_box_statistics(self.detector.detect(scene))
        if box is None:
            logger.debug("no vehicle in noisy sample")
            return np.full(7, np.nan)
        return box
