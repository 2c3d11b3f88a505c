import logging
from typing import Dict, Any

import numpy as np
from tqdm import tqdm

from fusioncert.defaults import DEFAULT_PERCENTILE
from fusioncert.detector import BoxStatistic, ConfidenceStatistic, box_from_statistics
from fusioncert.errors import InputError
from fusioncert.geometry import BoxInterval, exact_iou_3d, iou_lower_bound
from fusioncert.smoothing import (
    coordinate_views,
    median_estimate,
    median_vector,
    percentile_indices,
    sample_outputs,
    sample_statistics,
    shifted_percentiles,
    split_budget,
    stream_key,
)
from fusioncert.states import CellBound, CellDraw, CellPlan, CertifyState
from fusioncert.transforms import TransformKind, apply, interp_errors, transform_box

logger = logging.getLogger(__name__)

# One lower and one upper order statistic per box coordinate.
IOU_BOUNDS_PER_CELL = 14


def bounds_per_cell(mode: str) -> int:
    return IOU_BOUNDS_PER_CELL if mode == "iou" else 1


def partition_node(state: CertifyState) -> Dict[str, Any]:
    logger.info("--- PARTITION NODE ---")
    mode = state["mode"]
    cfg = state["cfg"]
    grid = state["grid"]
    errors = interp_errors(state["kind"], state["scene"], grid)
    cell_alpha = split_budget(cfg.alpha, len(grid) * bounds_per_cell(mode))

    plans = []
    for cell, err in zip(grid, errors):
        pair = shifted_percentiles(DEFAULT_PERCENTILE, err.m_x, err.m_p, cfg.sigma_x, cfg.sigma_p)
        k_lo, k_hi = percentile_indices(cfg.n, pair, cell_alpha)
        plans.append(CellPlan(cell, err, pair, cell_alpha, k_lo, k_hi, mode))

    blocked = sum(1 for p in plans if not p.certifiable)
    if blocked:
        logger.warning("%d of %d cells cannot be certified with n=%d", blocked, len(plans), cfg.n)
    return {
        "plans": plans,
        "messages": [f"partitioned into {len(plans)} cells, alpha per bound {cell_alpha:.3g}"],
    }


def _pivot(state: CertifyState) -> tuple[float, float]:
    return (state["scene"].gt.x, state["scene"].gt.z)


def reference_node(state: CertifyState) -> Dict[str, Any]:
    logger.info("--- REFERENCE NODE ---")
    scene, cfg = state["scene"], state["cfg"]
    identity = (0.0,) * state["grid"].space.m
    stream = stream_key(*identity)
    if state["mode"] == "iou":
        raw = sample_outputs(BoxStatistic(state["detector"]), scene, cfg, stream, state["workers"])
        box = box_from_statistics(median_vector(raw))
        clean = exact_iou_3d(box, state["gt"]) if box is not None else 0.0
    else:
        samples = sample_statistics(ConfidenceStatistic(state["detector"]), scene, cfg, stream, state["workers"])
        clean = median_estimate(samples)
    return {"clean_value": clean, "messages": [f"clean smoothed value {clean:.6f}"]}


def sampler_node(state: CertifyState) -> Dict[str, Any]:
    logger.info("--- SAMPLER NODE ---")
    kind = TransformKind.parse(state["kind"])
    scene, cfg, mode = state["scene"], state["cfg"], state["mode"]
    workers = state["workers"]
    detector = state["detector"]
    pivot = _pivot(state)

    todo = [p for p in state["plans"] if p.certifiable]
    draws = []
    for plan in tqdm(todo, desc="cells", unit="cell", disable=not state["show_progress"], leave=False):
        cell = plan.cell
        moved = apply(kind, scene, cell.anchor)
        stream = stream_key(*cell.anchor)
        if mode == "iou":
            raw = sample_outputs(BoxStatistic(detector), moved, cfg, stream, workers, cell.index)
            lo_view, hi_view = coordinate_views(raw.reshape(cfg.n, 7))
            gt = transform_box(kind, state["gt"], cell.anchor, pivot)
            draws.append(CellDraw(cell.index, lo_view[plan.k_lo - 1], hi_view[plan.k_hi - 1], gt))
        else:
            samples = sample_statistics(ConfidenceStatistic(detector), moved, cfg, stream, workers, cell.index)
            lo = np.array([samples.order_statistic(plan.k_lo)])
            hi = np.array([samples.order_statistic(plan.k_hi)]) if plan.k_hi is not None else None
            draws.append(CellDraw(cell.index, lo, hi))
    return {"draws": draws}


def _iou_bound(plan: CellPlan, draw: CellDraw) -> CellBound:
    if not (np.all(np.isfinite(draw.lo)) and np.all(np.isfinite(draw.hi))):
        logger.debug("cell %d: missing detections reach the order statistic", plan.cell.index)
        return CellBound(plan, None, gt=draw.gt)
    try:
        interval = BoxInterval(tuple(draw.lo), tuple(draw.hi))
    except InputError as exc:
        logger.debug("cell %d: %s", plan.cell.index, exc)
        return CellBound(plan, None, gt=draw.gt)
    return CellBound(plan, iou_lower_bound(interval, draw.gt), interval=interval, gt=draw.gt)


def bound_node(state: CertifyState) -> Dict[str, Any]:
    logger.info("--- BOUND NODE ---")
    draws = {d.index: d for d in state.get("draws", [])}
    bounds = []
    for plan in state["plans"]:
        draw = draws.get(plan.cell.index)
        if draw is None:
            bounds.append(CellBound(plan, None))
        elif plan.mode == "iou":
            bounds.append(_iou_bound(plan, draw))
        else:
            upper = float(draw.hi[0]) if draw.hi is not None else None
            bounds.append(CellBound(plan, float(draw.lo[0]), upper=upper))
    return {"bounds": bounds}


def aggregate_node(state: CertifyState) -> Dict[str, Any]:
    logger.info("--- AGGREGATE NODE ---")
    bounds = state["bounds"]
    certified = min((b.value if b.certifiable else 0.0) for b in bounds)
    uppers = [b.upper if b.upper is not None else 1.0 for b in bounds]
    blocked = sum(1 for b in bounds if not b.certifiable)
    return {
        "certified": max(0.0, certified),
        "upper": max(uppers),
        "uncertifiable": blocked,
        "messages": [f"certified {certified:.6f} over {len(bounds)} cells ({blocked} uncertifiable)"],
    }
