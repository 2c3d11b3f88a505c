"""Detection and IoU certificates over a parameter grid, plus the grid attack.

Both certificates run the ``fusioncert.graph`` pipeline. The failure budget
``cfg.alpha`` is split evenly over every one-sided order-statistic bound the
certificate relies on: one per cell for detection, fourteen per cell (a lower
and an upper bound on each box coordinate) for IoU.
"""

import math
import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from fusioncert.config import SmoothingConfig
from fusioncert.defaults import DEFAULT_ETA
from fusioncert.detector import (
    BoxStatistic,
    ConfidenceStatistic,
    box_from_statistics,
    top_vehicle_box_statistics,
    top_vehicle_confidence,
)
from fusioncert.errors import InputError
from fusioncert.geometry import Box3D, exact_iou_3d
from fusioncert.graph import build_graph
from fusioncert.scene import Scene
from fusioncert.smoothing import median_estimate, median_vector, sample_outputs, sample_statistics, stream_key
from fusioncert.states import CellBound
from fusioncert.transforms import ParamGrid, ParamSpace, ParamVector, TransformKind, apply, transform_box

logger = logging.getLogger(__name__)

_graph = None


def certification_graph():
    global _graph
    if _graph is None:
        _graph = build_graph(None)
    return _graph


@dataclass(frozen=True)
class DetectionCertificate:
    certified_lo: float
    empirical_hi: float
    median_clean: float
    detected: bool
    per_cell: tuple[CellBound, ...]
    eta: float
    alpha_total: float

    @property
    def uncertifiable_cells(self) -> int:
        return sum(1 for b in self.per_cell if not b.certifiable)


@dataclass(frozen=True)
class IoUCertificate:
    certified_iou: float
    per_cell: tuple[CellBound, ...]
    gt: Box3D
    alpha_total: float
    clean_iou: float

    @property
    def uncertifiable_cells(self) -> int:
        return sum(1 for b in self.per_cell if not b.certifiable)

    def meets(self, threshold: float) -> bool:
        return self.certified_iou >= threshold


@dataclass(frozen=True)
class AttackResult:
    metric: str
    worst_value: float
    worst_param: ParamVector
    params: tuple[ParamVector, ...]
    values: tuple[float, ...]
    smoothed: bool = True


def _run(mode: str, detector, scene: Scene, kind, grid: ParamGrid, cfg: SmoothingConfig,
         gt: Box3D, workers: int, show_progress: bool) -> dict:
    kind = TransformKind.parse(kind)
    if grid.space.m != kind.dims:
        raise InputError(f"grid: {kind.value} needs a {kind.dims}-D parameter space, got {grid.space.m}-D")
    state = {
        "mode": mode,
        "kind": kind.value,
        "scene": scene,
        "grid": grid,
        "cfg": cfg,
        "detector": detector,
        "gt": gt,
        "workers": max(1, int(workers)),
        "show_progress": show_progress,
        "plans": [],
        "clean_value": 0.0,
        "draws": [],
        "bounds": [],
        "certified": 0.0,
        "upper": 1.0,
        "uncertifiable": 0,
        "messages": [],
    }
    final = certification_graph().invoke(state)
    for message in final.get("messages", []):
        logger.debug(message)
    return final


def certify_detection(
    detector,
    scene: Scene,
    kind: Union[str, TransformKind],
    grid: ParamGrid,
    cfg: SmoothingConfig,
    eta: float = DEFAULT_ETA,
    workers: int = 1,
    show_progress: bool = False,
) -> DetectionCertificate:
    """Lower bound on the smoothed top-vehicle confidence over every parameter in ``grid``."""
    if not 0.0 <= eta <= 1.0:
        raise InputError(f"eta: must lie in [0, 1], got {eta}")
    final = _run("detection", detector, scene, kind, grid, cfg, scene.gt, workers, show_progress)
    certified = final["certified"]
    return DetectionCertificate(
        certified_lo=certified,
        empirical_hi=final["upper"],
        median_clean=final["clean_value"],
        detected=certified >= eta,
        per_cell=tuple(final["bounds"]),
        eta=eta,
        alpha_total=cfg.alpha,
    )


def certify_iou(
    detector,
    scene: Scene,
    kind: Union[str, TransformKind],
    grid: ParamGrid,
    cfg: SmoothingConfig,
    gt: Optional[Box3D] = None,
    workers: int = 1,
    show_progress: bool = False,
) -> IoUCertificate:
    """Lower bound on IoU between the smoothed box and the ground truth moved to each cell anchor."""
    gt = gt or scene.gt
    final = _run("iou", detector, scene, kind, grid, cfg, gt, workers, show_progress)
    return IoUCertificate(
        certified_iou=final["certified"],
        per_cell=tuple(final["bounds"]),
        gt=gt,
        alpha_total=cfg.alpha,
        clean_iou=final["clean_value"],
    )


def attack_params(space: ParamSpace, step: Union[float, Sequence[float]]) -> list[ParamVector]:
    """lo, lo + step, lo + 2 step, ... per axis, always ending on hi; cartesian product."""
    steps = (step,) * space.m if isinstance(step, (int, float)) else tuple(step)
    if len(steps) != space.m or any(s <= 0 for s in steps):
        raise InputError("attack step: need one positive step per axis")
    axes = []
    for (lo, hi), s in zip(space.dims, steps):
        count = int(math.floor((hi - lo) / s + 1e-9))
        values = [lo + k * s for k in range(count + 1)]
        if hi - values[-1] <= 1e-9 * s:
            values[-1] = hi
        else:
            values.append(hi)
        axes.append(values)
    grids = np.meshgrid(*axes, indexing="ij")
    return [tuple(float(g.flat[i]) for g in grids) for i in range(grids[0].size)]


def empirical_attack(
    detector,
    scene: Scene,
    kind: Union[str, TransformKind],
    space: ParamSpace,
    step: Union[float, Sequence[float]],
    cfg: SmoothingConfig,
    metric: str = "confidence",
    gt: Optional[Box3D] = None,
    workers: int = 1,
    show_progress: bool = False,
    smoothed: bool = True,
) -> AttackResult:
    """Confidence or IoU at every step of the space; reports the worst one.

    With ``smoothed=False`` the detector runs once per parameter on the
    noise-free transformed scene.
    """
    kind = TransformKind.parse(kind)
    if metric not in ("confidence", "iou"):
        raise InputError(f"metric: must be 'confidence' or 'iou', got {metric!r}")
    if space.m != kind.dims:
        raise InputError(f"space: {kind.value} needs a {kind.dims}-D parameter space")
    params = attack_params(space, step)
    base_gt = gt or scene.gt
    pivot = (scene.gt.x, scene.gt.z)

    values = []
    for z in tqdm(params, desc="attack", unit="param", disable=not show_progress, leave=False):
        moved = apply(kind, scene, z)
        stream = stream_key(*z)
        if not smoothed:
            values.append(vanilla_value(detector, moved, metric, transform_box(kind, base_gt, z, pivot)))
        elif metric == "confidence":
            samples = sample_statistics(ConfidenceStatistic(detector), moved, cfg, stream, workers)
            values.append(median_estimate(samples))
        else:
            raw = sample_outputs(BoxStatistic(detector), moved, cfg, stream, workers)
            box = box_from_statistics(median_vector(raw))
            target = transform_box(kind, base_gt, z, pivot)
            values.append(exact_iou_3d(box, target) if box is not None else 0.0)
    worst = int(np.argmin(values))
    logger.info("worst %s %s %.6f at %s", "smoothed" if smoothed else "vanilla", metric, values[worst], params[worst])
    return AttackResult(metric, float(values[worst]), params[worst], tuple(params), tuple(values), smoothed)


def vanilla_value(detector, scene: Scene, metric: str, target: Optional[Box3D] = None) -> float:
    """Top-vehicle confidence, or its IoU with ``target``, from one noise-free detector call."""
    detections = detector.detect(scene)
    if metric == "confidence":
        return top_vehicle_confidence(detections)
    stats = top_vehicle_box_statistics(detections)
    box = box_from_statistics(stats) if stats is not None else None
    return exact_iou_3d(box, target or scene.gt) if box is not None else 0.0
