"""Synthetic multi-modal scenes: one vehicle as a point cloud plus a camera image
rendered from the same geometry, with the vehicle's ground-truth box.

Axes: x left, y down, z forward. The camera sits at the origin looking along +z.
"""

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from fusioncert.defaults import (
    CAMERA_HEIGHT,
    GROUND_ALBEDO,
    IMAGE_HEIGHT,
    IMAGE_WIDTH,
    VEHICLE_ALBEDO,
)
from fusioncert.errors import InputError, SceneFormatError, SceneValidationError
from fusioncert.geometry import BOX_FIELDS, Box3D

logger = logging.getLogger(__name__)


class Camera(BaseModel):
    """Pinhole intrinsics plus the image size (pixels)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    fx: float = Field(gt=0, allow_inf_nan=False)
    fy: float = Field(gt=0, allow_inf_nan=False)
    cx: float = Field(allow_inf_nan=False)
    cy: float = Field(allow_inf_nan=False)
    width: int = Field(ge=8)
    height: int = Field(ge=8)


class SceneSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    vehicle_w: float = Field(default=1.8, gt=0)
    vehicle_h: float = Field(default=1.5, gt=0)
    vehicle_l: float = Field(default=4.0, gt=0)
    x: float = 0.0
    y: float = CAMERA_HEIGHT
    z: float = 10.0
    r: float = 0.0
    vehicle_points: int = Field(default=500, ge=1)
    background_points: int = Field(default=1000, ge=0)
    background_extent: float = Field(default=20.0, gt=0)
    clutter_objects: int = Field(default=0, ge=0)
    clutter_points: int = Field(default=30, ge=1)
    image_height: int = Field(default=IMAGE_HEIGHT, ge=8)
    image_width: int = Field(default=IMAGE_WIDTH, ge=8)
    focal: float = Field(default=60.0, gt=0)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _vehicle_in_front(self):
        if self.z - self.vehicle_l <= 0:
            raise ValueError("z: vehicle must sit in front of the camera")
        return self

    def camera(self) -> Camera:
        return Camera(
            fx=self.focal,
            fy=self.focal,
            cx=self.image_width / 2.0,
            cy=self.image_height / 2.0,
            width=self.image_width,
            height=self.image_height,
        )

    def vehicle_box(self) -> Box3D:
        return Box3D(self.x, self.y, self.z, self.vehicle_w, self.vehicle_h, self.vehicle_l, self.r)


@dataclass(frozen=True)
class Scene:
    image: np.ndarray
    points: np.ndarray
    object_mask: np.ndarray
    gt: Box3D
    camera: Camera

    def __post_init__(self):
        image = np.asarray(self.image, dtype=float)
        points = np.asarray(self.points, dtype=float)
        mask = np.asarray(self.object_mask, dtype=np.int64).reshape(-1)
        if image.shape != (self.camera.height, self.camera.width):
            raise SceneValidationError(
                "image", f"shape {image.shape} does not match camera {(self.camera.height, self.camera.width)}"
            )
        if not np.all(np.isfinite(image)):
            raise SceneValidationError("image", "values must be finite")
        if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] < 1:
            raise SceneValidationError("points", f"expected an N x 3 array with N >= 1, got {points.shape}")
        if not np.all(np.isfinite(points)):
            raise SceneValidationError("points", "coordinates must be finite")
        if mask.size and (mask.min() < 0 or mask.max() >= points.shape[0]):
            raise SceneValidationError("object_mask", "indices out of range")
        if np.unique(mask).size != mask.size:
            raise SceneValidationError("object_mask", "indices must be unique")
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "object_mask", mask)

    @property
    def intensities(self) -> np.ndarray:
        values = np.full(self.points.shape[0], GROUND_ALBEDO)
        values[self.object_mask] = VEHICLE_ALBEDO
        return values

    def perturbed(self, image: np.ndarray, points: np.ndarray) -> "Scene":
        return replace(self, image=image, points=points)

    def with_geometry(self, points: np.ndarray, gt: Box3D) -> "Scene":
        """Same scene with moved points and box; the image is re-rendered."""
        image = rasterize(points, self.intensities, self.camera)
        return replace(self, image=image, points=points, gt=gt)

    def equals(self, other: "Scene") -> bool:
        return (
            np.array_equal(self.image, other.image)
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.object_mask, other.object_mask)
            and self.gt == other.gt
            and self.camera == other.camera
        )


def rasterize(points: np.ndarray, intensities: np.ndarray, camera: Camera) -> np.ndarray:
    """Pinhole projection with a z-buffer: the nearest point wins each pixel.

    Ties in depth go to the lower point index; pixels hit by no point are 0 and
    points at or behind the camera plane are skipped.
    """
    image = np.zeros((camera.height, camera.width))
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if points.shape[0] == 0:
        return image
    depth = points[:, 2]
    front = depth > 1e-9
    safe_depth = np.where(front, depth, 1.0)
    u = camera.fx * points[:, 0] / safe_depth + camera.cx
    v = camera.fy * points[:, 1] / safe_depth + camera.cy
    visible = front & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    idx = np.nonzero(visible)[0]
    if idx.size == 0:
        return image
    pixel = np.floor(v[idx]).astype(np.int64) * camera.width + np.floor(u[idx]).astype(np.int64)
    order = np.lexsort((idx, depth[idx]))
    pixel_sorted = pixel[order]
    winners, first = np.unique(pixel_sorted, return_index=True)
    image.flat[winners] = np.asarray(intensities, dtype=float)[idx[order][first]]
    return image


def _surface_points(box: Box3D, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the six faces of ``box``."""
    w, h, l = box.w, box.h, box.l
    areas = np.array([h * l, h * l, w * h, w * h, w * l, w * l])
    face = rng.choice(6, size=count, p=areas / areas.sum())
    u = rng.uniform(-w / 2.0, w / 2.0, size=count)
    y = rng.uniform(box.y - h, box.y, size=count)
    t = rng.uniform(-l / 2.0, l / 2.0, size=count)
    u = np.where(face == 0, w / 2.0, np.where(face == 1, -w / 2.0, u))
    t = np.where(face == 2, l / 2.0, np.where(face == 3, -l / 2.0, t))
    y = np.where(face == 4, box.y - h, np.where(face == 5, box.y, y))
    c, s = np.cos(box.r), np.sin(box.r)
    x = box.x + c * u - s * t
    z = box.z + s * u + c * t
    return np.column_stack([x, y, z])


def _inside_footprint(box: Box3D, x: np.ndarray, z: np.ndarray, margin: float = 0.0) -> np.ndarray:
    c, s = np.cos(box.r), np.sin(box.r)
    dx, dz = x - box.x, z - box.z
    u = c * dx + s * dz
    t = -s * dx + c * dz
    return (np.abs(u) <= box.w / 2.0 + margin) & (np.abs(t) <= box.l / 2.0 + margin)


def _ground_points(spec: SceneSpec, box: Box3D, rng: np.random.Generator) -> np.ndarray:
    chunks, have = [], 0
    near = max(1.0, spec.z - spec.background_extent)
    while have < spec.background_points:
        need = spec.background_points - have
        x = rng.uniform(-spec.background_extent, spec.background_extent, size=2 * need)
        z = rng.uniform(near, spec.z + spec.background_extent, size=2 * need)
        keep = ~_inside_footprint(box, x, z)
        x, z = x[keep][:need], z[keep][:need]
        chunks.append(np.column_stack([x, np.full(x.size, spec.y), z]))
        have += x.size
    if not chunks:
        return np.empty((0, 3))
    return np.concatenate(chunks)


def _clutter_points(spec: SceneSpec, box: Box3D, rng: np.random.Generator) -> np.ndarray:
    chunks = []
    near = max(2.0, spec.z - spec.background_extent)
    while len(chunks) < spec.clutter_objects:
        cx = rng.uniform(-spec.background_extent, spec.background_extent)
        cz = rng.uniform(near, spec.z + spec.background_extent)
        if np.hypot(cx - box.x, cz - box.z) < max(box.w, box.l) + 2.0:
            continue
        pole = Box3D(cx, spec.y, cz, 0.3, 1.0, 0.3, 0.0)
        chunks.append(_surface_points(pole, spec.clutter_points, rng))
    if not chunks:
        return np.empty((0, 3))
    return np.concatenate(chunks)


def generate(spec: SceneSpec) -> Scene:
    """Deterministic scene for ``spec``: vehicle surface, ground plane, clutter."""
    if not isinstance(spec, SceneSpec):
        raise InputError("generate: expected a SceneSpec")
    rng = np.random.default_rng(spec.seed)
    box = spec.vehicle_box()
    vehicle = _surface_points(box, spec.vehicle_points, rng)
    ground = _ground_points(spec, box, rng)
    clutter = _clutter_points(spec, box, rng)
    points = np.concatenate([vehicle, ground, clutter])
    mask = np.arange(vehicle.shape[0])
    camera = spec.camera()
    intensities = np.full(points.shape[0], GROUND_ALBEDO)
    intensities[mask] = VEHICLE_ALBEDO
    image = rasterize(points, intensities, camera)
    logger.debug("generated scene: %d vehicle, %d ground, %d clutter points", len(vehicle), len(ground), len(clutter))
    return Scene(image=image, points=points, object_mask=mask, gt=box, camera=camera)


class GroundTruthDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    x: float = Field(allow_inf_nan=False)
    y: float = Field(allow_inf_nan=False)
    z: float = Field(allow_inf_nan=False)
    w: float = Field(gt=0, allow_inf_nan=False)
    h: float = Field(gt=0, allow_inf_nan=False)
    l: float = Field(gt=0, allow_inf_nan=False)
    r: float = Field(allow_inf_nan=False)


class SceneDocument(BaseModel):
    """On-disk scene layout; the field names are part of the file format."""

    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)

    image: list[list[float]]
    points: list[tuple[float, float, float]]
    object_mask: list[int]
    gt: GroundTruthDocument
    camera: Camera


def scene_to_document(scene: Scene) -> dict:
    return {
        "image": scene.image.tolist(),
        "points": scene.points.tolist(),
        "object_mask": [int(i) for i in scene.object_mask],
        "gt": scene.gt.as_dict(),
        "camera": scene.camera.model_dump(),
    }


def scene_from_document(data) -> Scene:
    try:
        doc = SceneDocument.model_validate(data)
    except ValidationError as exc:
        error = exc.errors()[0]
        field = ".".join(str(part) for part in error["loc"]) or "scene"
        message = error["msg"]
        if error["type"] == "missing":
            message = "required"
        raise SceneValidationError(field, message) from exc
    gt = Box3D(*(getattr(doc.gt, name) for name in BOX_FIELDS))
    return Scene(
        image=np.array(doc.image, dtype=float),
        points=np.array(doc.points, dtype=float).reshape(-1, 3),
        object_mask=np.array(doc.object_mask, dtype=np.int64),
        gt=gt,
        camera=doc.camera,
    )


def save(scene: Scene, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(scene_to_document(scene), allow_nan=False), encoding="utf-8")


def load(path: Union[str, Path]) -> Scene:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        line = raw.count(b"\n", 0, exc.start) + 1
        column = exc.start - (raw.rfind(b"\n", 0, exc.start) + 1) + 1
        raise SceneFormatError(f"scene file {path} is not UTF-8 at byte {exc.start}", line, column) from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"malformed scene file {path}: {exc.msg}", exc.lineno, exc.colno) from exc
    return scene_from_document(data)


def scene_id(path: Optional[Union[str, Path]]) -> str:
    return Path(path).stem if path else "scene"
