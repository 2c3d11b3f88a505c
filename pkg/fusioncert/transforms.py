"""Semantic transformations of a scene's foreground vehicle and parameter grids.

Rotation turns the vehicle about the vertical axis through its ground-truth box
center. With ``(x, z)`` column vectors and

    R(t) = [[cos t, -sin t],
            [sin t,  cos t]]

an object point ``p`` maps to ``c + R(t) (p - c)`` and the box heading becomes
``r + t``. Seen from above (looking along +y, which points down) a positive
``t`` turns the vehicle clockwise. Shifting moves the vehicle and its box along
+z by the parameter (meters). ``rotation_shifting`` rotates first, then shifts.
"""

import math
import logging
from dataclasses import dataclass, field
from enum import Enum
from itertools import product
from typing import Optional, Sequence, Union

import numpy as np

from fusioncert.errors import InputError
from fusioncert.geometry import Box3D
from fusioncert.scene import Scene

logger = logging.getLogger(__name__)

ParamVector = tuple[float, ...]


class TransformKind(str, Enum):
    ROTATION = "rotation"
    SHIFTING = "shifting"
    ROTATION_SHIFTING = "rotation_shifting"

    @property
    def dims(self) -> int:
        return 2 if self is TransformKind.ROTATION_SHIFTING else 1

    @classmethod
    def parse(cls, value: Union[str, "TransformKind"]) -> "TransformKind":
        try:
            return cls(value)
        except ValueError:
            choices = ", ".join(kind.value for kind in cls)
            raise InputError(f"transform: unknown kind {value!r} (choose from {choices})") from None


@dataclass(frozen=True)
class ParamSpace:
    """Closed box of parameters; radians for rotation axes, meters for shifting."""

    dims: tuple[tuple[float, float], ...]

    def __post_init__(self):
        dims = tuple((float(lo), float(hi)) for lo, hi in self.dims)
        if not dims:
            raise InputError("space: need at least one dimension")
        for i, (lo, hi) in enumerate(dims):
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise InputError(f"space.dims.{i}: bounds must be finite")
            if lo > hi:
                raise InputError(f"space.dims.{i}: lower bound {lo} exceeds upper bound {hi}")
        object.__setattr__(self, "dims", dims)

    @property
    def m(self) -> int:
        return len(self.dims)

    def widths(self) -> tuple[float, ...]:
        return tuple(hi - lo for lo, hi in self.dims)

    def diameter(self) -> float:
        return max(self.widths())

    def contains(self, z: Sequence[float], eps: float = 1e-12) -> bool:
        if len(z) != self.m:
            return False
        return all(lo - eps <= v <= hi + eps for v, (lo, hi) in zip(z, self.dims))

    def lower(self) -> ParamVector:
        return tuple(lo for lo, _ in self.dims)


@dataclass(frozen=True)
class Cell:
    index: int
    multi_index: tuple[int, ...]
    lo: ParamVector
    hi: ParamVector
    anchor: ParamVector

    def widths(self) -> tuple[float, ...]:
        return tuple(b - a for a, b in zip(self.lo, self.hi))

    def contains(self, z: Sequence[float], eps: float = 1e-12) -> bool:
        return all(a - eps <= v <= b + eps for v, a, b in zip(z, self.lo, self.hi))


@dataclass(frozen=True)
class ParamGrid:
    """Affine lattice over a ParamSpace, cells enumerated lexicographically.

    Edge k of axis i is ``(K - k)/K * l + k/K * u``; edges are never accumulated,
    so neighbouring cells share their faces exactly.
    """

    space: ParamSpace
    counts: tuple[int, ...]
    anchor: str = "lower"
    seed: int = 0
    cells: tuple[Cell, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        counts = tuple(int(k) for k in self.counts)
        if len(counts) != self.space.m:
            raise InputError(f"grid: expected {self.space.m} counts, got {len(counts)}")
        if any(k < 1 for k in counts):
            raise InputError("grid: every count must be >= 1")
        if self.anchor not in ("lower", "random"):
            raise InputError(f"grid.anchor: must be 'lower' or 'random', got {self.anchor!r}")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "cells", tuple(self._enumerate()))

    def edges(self, axis: int) -> np.ndarray:
        lo, hi = self.space.dims[axis]
        big_k = self.counts[axis]
        k = np.arange(big_k + 1)
        return (big_k - k) / big_k * lo + k / big_k * hi

    def _enumerate(self):
        edges = [self.edges(i) for i in range(self.space.m)]
        for index, multi in enumerate(product(*(range(k) for k in self.counts))):
            lo = tuple(float(edges[i][k]) for i, k in enumerate(multi))
            hi = tuple(float(edges[i][k + 1]) for i, k in enumerate(multi))
            if self.anchor == "lower":
                anchor = lo
            else:
                rng = np.random.default_rng(np.random.SeedSequence([self.seed, index]))
                u = rng.random(len(lo))
                anchor = tuple(float(a + t * (b - a)) for a, b, t in zip(lo, hi, u))
            yield Cell(index, tuple(multi), lo, hi, anchor)

    def __len__(self) -> int:
        return len(self.cells)

    def __iter__(self):
        return iter(self.cells)

    def cell_at(self, multi_index: Sequence[int]) -> Cell:
        flat = 0
        for k, count in zip(multi_index, self.counts):
            if not 0 <= k < count:
                raise InputError(f"grid: cell index {tuple(multi_index)} out of range")
            flat = flat * count + k
        return self.cells[flat]


def split(
    space: ParamSpace,
    counts: Union[int, Sequence[int]],
    anchor: str = "lower",
    seed: int = 0,
    tau: Optional[float] = None,
) -> ParamGrid:
    if isinstance(counts, (int, np.integer)):
        counts = (int(counts),) * space.m
    grid = ParamGrid(space, tuple(counts), anchor=anchor, seed=seed)
    if tau is not None:
        for i, (width, k) in enumerate(zip(space.widths(), grid.counts)):
            if width / k > tau:
                raise InputError(f"grid.counts.{i}: cell width {width / k} exceeds tau {tau}")
    return grid


def cells_for_width(space: ParamSpace, width: Union[float, Sequence[float]]) -> tuple[int, ...]:
    """Smallest counts whose cells are no wider than ``width`` along each axis."""
    widths = (width,) * space.m if isinstance(width, (int, float)) else tuple(width)
    counts = []
    for span, w in zip(space.widths(), widths):
        if w <= 0:
            raise InputError("grid: cell width must be positive")
        counts.append(max(1, math.ceil(span / w - 1e-9)))
    return tuple(counts)


def _check_params(kind: TransformKind, z: Sequence[float]) -> ParamVector:
    values = tuple(float(v) for v in np.atleast_1d(np.asarray(z, dtype=float)))
    if len(values) != kind.dims:
        raise InputError(f"{kind.value}: expected {kind.dims} parameter(s), got {len(values)}")
    if not all(math.isfinite(v) for v in values):
        raise InputError(f"{kind.value}: parameters must be finite")
    return values


def _rotate_xz(points: np.ndarray, angle: float, cx: float, cz: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    out = points.copy()
    dx = points[:, 0] - cx
    dz = points[:, 2] - cz
    # p + (R - I)(p - c) keeps angle 0 bit-exact.
    out[:, 0] = points[:, 0] + ((c - 1.0) * dx - s * dz)
    out[:, 2] = points[:, 2] + (s * dx + (c - 1.0) * dz)
    return out


def transform_points(
    kind: TransformKind, points: np.ndarray, z: Sequence[float], pivot: tuple[float, float]
) -> np.ndarray:
    params = _check_params(kind, z)
    out = np.asarray(points, dtype=float)
    if kind in (TransformKind.ROTATION, TransformKind.ROTATION_SHIFTING):
        out = _rotate_xz(out, params[0], *pivot)
    if kind in (TransformKind.SHIFTING, TransformKind.ROTATION_SHIFTING):
        out = out.copy()
        out[:, 2] = out[:, 2] + params[-1]
    return out


def transform_box(kind: TransformKind, box: Box3D, z: Sequence[float], pivot: tuple[float, float]) -> Box3D:
    """The box moved by the same rigid motion as the object points."""
    params = _check_params(kind, z)
    center = np.array([[box.x, box.y, box.z]])
    moved = transform_points(kind, center, params, pivot)[0]
    r = box.r + params[0] if kind in (TransformKind.ROTATION, TransformKind.ROTATION_SHIFTING) else box.r
    return Box3D(float(moved[0]), box.y, float(moved[2]), box.w, box.h, box.l, r)


def apply(
    kind: Union[str, TransformKind],
    scene: Scene,
    z: Sequence[float],
    space: Optional[ParamSpace] = None,
) -> Scene:
    """Transform the foreground vehicle by ``z`` and re-render the image.

    Background points keep their coordinates. The identity parameter returns
    the scene itself.
    """
    kind = TransformKind.parse(kind)
    params = _check_params(kind, z)
    if space is not None and not space.contains(params):
        raise InputError(f"{kind.value}: parameter {params} lies outside {space.dims}")
    if all(v == 0.0 for v in params):
        return scene
    pivot = (scene.gt.x, scene.gt.z)
    points = scene.points.copy()
    mask = scene.object_mask
    points[mask] = transform_points(kind, scene.points[mask], params, pivot)
    return scene.with_geometry(points, transform_box(kind, scene.gt, params, pivot))


@dataclass(frozen=True)
class InterpError:
    m_x: float
    m_p: float

    def __post_init__(self):
        if self.m_x < 0 or self.m_p < 0:
            raise InputError("interpolation errors must be >= 0")


class _Renderer:
    """Memoized transforms of one scene, keyed by the parameter vector."""

    def __init__(self, kind: TransformKind, scene: Scene):
        self.kind = kind
        self.scene = scene
        self._cache: dict[ParamVector, Scene] = {}

    def __call__(self, z: ParamVector, cache: bool = True) -> Scene:
        key = tuple(float(v) for v in z)
        if not cache:
            return self._cache.get(key) or apply(self.kind, self.scene, key)
        if key not in self._cache:
            self._cache[key] = apply(self.kind, self.scene, key)
        return self._cache[key]

    def distance(self, a: ParamVector, b: ParamVector, cache: bool = True) -> tuple[float, float]:
        sa, sb = self(a, cache), self(b, cache)
        return (
            float(np.linalg.norm(sa.image - sb.image)),
            float(np.linalg.norm(sa.points - sb.points)),
        )


def _cell_error(render: _Renderer, cell: Cell) -> InterpError:
    m = len(cell.lo)
    if m == 1:
        # Farthest cell end from the anchor; for a lower anchor this is lo -> hi.
        dx_lo, dp_lo = render.distance(cell.anchor, cell.lo)
        dx_hi, dp_hi = render.distance(cell.anchor, cell.hi)
        return InterpError(max(dx_lo, dx_hi), max(dp_lo, dp_hi))
    m_x = m_p = 0.0
    for axis in range(m):
        if cell.hi[axis] == cell.lo[axis]:
            continue
        worst_x = worst_p = 0.0
        others = [(cell.lo[j], cell.hi[j]) for j in range(m) if j != axis]
        for corner in product(*others):
            start = list(corner)
            start.insert(axis, cell.lo[axis])
            end = list(corner)
            end.insert(axis, cell.hi[axis])
            dx, dp = render.distance(tuple(start), tuple(end))
            worst_x, worst_p = max(worst_x, dx), max(worst_p, dp)
        m_x += worst_x
        m_p += worst_p
    return InterpError(m_x, m_p)


def cell_interp_error(kind: Union[str, TransformKind], scene: Scene, cell: Cell) -> InterpError:
    """L2 bound on how far any parameter in ``cell`` moves the input from the anchor.

    1-D cells use the distance from the anchor to the farther cell end. m-D
    cells sum, per axis, the longest cell edge along that axis.
    """
    kind = TransformKind.parse(kind)
    if all(a == b for a, b in zip(cell.lo, cell.hi)):
        return InterpError(0.0, 0.0)
    return _cell_error(_Renderer(kind, scene), cell)


def interp_errors(kind: Union[str, TransformKind], scene: Scene, grid: ParamGrid) -> list[InterpError]:
    """cell_interp_error for every cell, sharing renders between neighbouring cells."""
    kind = TransformKind.parse(kind)
    render = _Renderer(kind, scene)
    errors = []
    for cell in grid:
        if all(a == b for a, b in zip(cell.lo, cell.hi)):
            errors.append(InterpError(0.0, 0.0))
        else:
            errors.append(_cell_error(render, cell))
    return errors


@dataclass(frozen=True)
class PartitionStats:
    size: float
    pairs: int
    within_tau: bool
    violation_rate_points: float
    violation_rate_image: float
    ratio_points: tuple[float, float, float]
    ratio_image: tuple[float, float, float]

    def as_dict(self) -> dict:
        return {
            "size": self.size,
            "pairs": self.pairs,
            "within_tau": self.within_tau,
            "violation_rate_points": self.violation_rate_points,
            "violation_rate_image": self.violation_rate_image,
            "ratio_points": list(self.ratio_points),
            "ratio_image": list(self.ratio_image),
        }


@dataclass(frozen=True)
class PartitionReport:
    kind: TransformKind
    tau: float
    sizes: tuple[PartitionStats, ...]

    @property
    def max_violation_rate_points(self) -> float:
        return max((s.violation_rate_points for s in self.sizes), default=0.0)


def _ratio_summary(pair: np.ndarray, bound: np.ndarray) -> tuple[float, float, float]:
    """(median, 95th percentile, max) of pair distance over endpoint distance."""
    usable = bound > 0
    if not np.any(usable):
        return (0.0, 0.0, 0.0)
    ratio = pair[usable] / bound[usable]
    return (float(np.median(ratio)), float(np.percentile(ratio, 95)), float(ratio.max()))


def check_partition(
    kind: Union[str, TransformKind],
    scene: Scene,
    space: ParamSpace,
    tau: float,
    interval_sizes: Sequence[float],
    pairs_per_interval: int,
    seed: int,
    intervals_per_size: int = 10,
    slack: float = 1e-12,
) -> PartitionReport:
    """Empirical check that endpoint distances bound distances inside small intervals.

    For each size, random sub-boxes of that side length are drawn inside
    ``space``; inside each, random parameter pairs are compared against the
    sub-box's own interpolation error.
    """
    kind = TransformKind.parse(kind)
    if space.m != kind.dims:
        raise InputError(f"check_partition: {kind.value} needs a {kind.dims}-D space")
    if pairs_per_interval < 1 or intervals_per_size < 1:
        raise InputError("check_partition: pair and interval counts must be >= 1")
    render = _Renderer(kind, scene)
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    stats = []
    for size in interval_sizes:
        size = float(size)
        if size < 0 or size > space.diameter() + 1e-12:
            raise InputError(f"check_partition: interval size {size} exceeds the space diameter")
        pair_x, pair_p, bound_x, bound_p = [], [], [], []
        for _ in range(intervals_per_size):
            lo = tuple(
                float(a + rng.random() * max(0.0, (b - a) - size)) for a, b in space.dims
            )
            hi = tuple(min(a + size, b) for a, (_, b) in zip(lo, space.dims))
            bound = _cell_error(render, Cell(-1, (), lo, hi, lo)) if size > 0 else InterpError(0.0, 0.0)
            for _ in range(pairs_per_interval):
                z1 = tuple(float(a + rng.random() * (b - a)) for a, b in zip(lo, hi))
                z2 = tuple(float(a + rng.random() * (b - a)) for a, b in zip(lo, hi))
                dx, dp = render.distance(z1, z2, cache=False)
                pair_x.append(dx)
                pair_p.append(dp)
                bound_x.append(bound.m_x)
                bound_p.append(bound.m_p)
        pair_x, pair_p = np.array(pair_x), np.array(pair_p)
        bound_x, bound_p = np.array(bound_x), np.array(bound_p)
        stats.append(
            PartitionStats(
                size=size,
                pairs=int(pair_p.size),
                within_tau=size < tau,
                violation_rate_points=float(np.mean(pair_p > bound_p + slack)),
                violation_rate_image=float(np.mean(pair_x > bound_x + slack)),
                ratio_points=_ratio_summary(pair_p, bound_p),
                ratio_image=_ratio_summary(pair_x, bound_x),
            )
        )
        logger.debug("partition size %g: point violation rate %.4f", size, stats[-1].violation_rate_points)
    return PartitionReport(kind, float(tau), tuple(stats))
