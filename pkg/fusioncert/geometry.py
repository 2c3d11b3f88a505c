"""Oriented boxes, convex polygons and the certified IoU lower bound.

Conventions used throughout the package:

* Boxes are ``(x, y, z, w, h, l, r)``. ``(x, z)`` is the ground-plane center,
  ``y`` is the top of the vertical extent so the box spans ``[y - h, y]``.
* The footprint is the ``w x l`` rectangle (``w`` along the local x axis, ``l``
  along the local z axis) rotated by ``r`` with

      R(r) = [[cos r, -sin r],
              [sin r,  cos r]]

  acting on ``(x, z)`` column vectors.
* Polygons live in the x-z plane and are counter-clockwise.
"""

import math
import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.spatial import ConvexHull, QhullError

from fusioncert.defaults import GEOMETRY_EPS
from fusioncert.errors import InputError

logger = logging.getLogger(__name__)

Point = tuple[float, float]

BOX_FIELDS = ("x", "y", "z", "w", "h", "l", "r")
TWO_PI = 2.0 * math.pi

# Local footprint corners in CCW order: (+,+), (-,+), (-,-), (+,-).
_CORNER_SIGNS = ((1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0))


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    w: float
    h: float
    l: float
    r: float

    def __post_init__(self):
        for name in BOX_FIELDS:
            value = getattr(self, name)
            if not math.isfinite(value):
                raise InputError(f"box.{name}: must be finite, got {value}")
        for name in ("w", "h", "l"):
            if getattr(self, name) <= 0:
                raise InputError(f"box.{name}: must be positive, got {getattr(self, name)}")

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Box3D":
        if len(values) != 7:
            raise InputError(f"box: expected 7 coordinates, got {len(values)}")
        return cls(*(float(v) for v in values))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w, self.h, self.l, self.r], dtype=float)

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in BOX_FIELDS}

    @property
    def volume(self) -> float:
        return self.w * self.h * self.l

    def footprint(self) -> "Polygon2D":
        return box_corners_2d(self)


@dataclass(frozen=True)
class BoxInterval:
    """Per-coordinate bounds ``lo <= box <= hi`` on a Box3D."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if len(lo) != 7 or len(hi) != 7:
            raise InputError("interval: lo and hi need 7 coordinates each")
        for name, a, b in zip(BOX_FIELDS, lo, hi):
            if not (math.isfinite(a) and math.isfinite(b)):
                raise InputError(f"interval.{name}: bounds must be finite, got [{a}, {b}]")
            if a > b:
                raise InputError(f"interval.{name}: lower bound {a} exceeds upper bound {b}")
        for name in ("w", "h", "l"):
            if self.lower(name) <= 0:
                raise InputError(f"interval.{name}: lower bound must be positive")
        if self.upper("r") - self.lower("r") >= TWO_PI:
            raise InputError("interval.r: width must stay below 2*pi")

    @classmethod
    def degenerate(cls, box: Box3D) -> "BoxInterval":
        values = tuple(box.as_array())
        return cls(values, values)

    def lower(self, name: str) -> float:
        return self.lo[BOX_FIELDS.index(name)]

    def upper(self, name: str) -> float:
        return self.hi[BOX_FIELDS.index(name)]

    def contains(self, box: Box3D, eps: float = 0.0) -> bool:
        values = box.as_array()
        return all(a - eps <= v <= b + eps for a, v, b in zip(self.lo, values, self.hi))

    def as_dict(self) -> dict[str, list[float]]:
        return {name: [a, b] for name, a, b in zip(BOX_FIELDS, self.lo, self.hi)}


@dataclass(frozen=True)
class Polygon2D:
    vertices: tuple[Point, ...]

    def __len__(self) -> int:
        return len(self.vertices)

    @property
    def area(self) -> float:
        return polygon_area(self)

    def is_convex(self, eps: float = GEOMETRY_EPS) -> bool:
        pts = self.vertices
        k = len(pts)
        if k < 3:
            return True
        for i in range(k):
            ax, az = pts[i]
            bx, bz = pts[(i + 1) % k]
            cx, cz = pts[(i + 2) % k]
            if (bx - ax) * (cz - bz) - (bz - az) * (cx - bx) < -eps:
                return False
        return True

    def contains(self, point: Point, eps: float = GEOMETRY_EPS) -> bool:
        """Point-in-convex-polygon test with ``eps`` slack on every edge."""
        pts = self.vertices
        k = len(pts)
        px, pz = point
        if k == 0:
            return False
        if k == 1:
            return math.hypot(px - pts[0][0], pz - pts[0][1]) <= eps
        if k == 2:
            (ax, az), (bx, bz) = pts
            length = math.hypot(bx - ax, bz - az)
            if length == 0.0:
                return math.hypot(px - ax, pz - az) <= eps
            cross = ((bx - ax) * (pz - az) - (bz - az) * (px - ax)) / length
            t = ((px - ax) * (bx - ax) + (pz - az) * (bz - az)) / (length * length)
            return abs(cross) <= eps and -eps <= t * length <= length + eps
        for i in range(k):
            ax, az = pts[i]
            bx, bz = pts[(i + 1) % k]
            length = math.hypot(bx - ax, bz - az)
            if length == 0.0:
                continue
            if ((bx - ax) * (pz - az) - (bz - az) * (px - ax)) / length < -eps:
                return False
        return True


def box_corners_2d(box: Box3D) -> Polygon2D:
    c, s = math.cos(box.r), math.sin(box.r)
    half_w, half_l = box.w / 2.0, box.l / 2.0
    corners = []
    for sx, sz in _CORNER_SIGNS:
        a, b = sx * half_w, sz * half_l
        corners.append((box.x + c * a - s * b, box.z + s * a + c * b))
    return Polygon2D(tuple(corners))


def convex_hull(points: Iterable[Point]) -> Polygon2D:
    """CCW convex hull; collinear input degrades to a 2- or 1-vertex polygon."""
    pts = np.asarray(list(points), dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise InputError("convex_hull: need at least one point")
    if not np.all(np.isfinite(pts)):
        raise InputError("convex_hull: coordinates must be finite")
    unique = np.unique(pts, axis=0)
    if len(unique) == 1:
        return Polygon2D((tuple(unique[0]),))
    if len(unique) >= 3:
        try:
            hull = ConvexHull(unique)
            return Polygon2D(tuple((float(x), float(z)) for x, z in unique[hull.vertices]))
        except QhullError:
            logger.debug("qhull rejected %d points as flat, using segment hull", len(unique))
    # All points on one line: keep the two extremes along the spread direction.
    offsets = unique - unique[0]
    direction = offsets[np.argmax(np.einsum("ij,ij->i", offsets, offsets))]
    projection = offsets @ direction
    lo, hi = unique[np.argmin(projection)], unique[np.argmax(projection)]
    return Polygon2D(((float(lo[0]), float(lo[1])), (float(hi[0]), float(hi[1]))))


def polygon_area(poly: Polygon2D) -> float:
    pts = poly.vertices
    k = len(pts)
    if k < 3:
        return 0.0
    total = 0.0
    for i in range(k):
        x1, z1 = pts[i]
        x2, z2 = pts[(i + 1) % k]
        total += x1 * z2 - x2 * z1
    return abs(total) / 2.0


def clip_convex(subject: Polygon2D, clip: Polygon2D) -> Polygon2D:
    """Sutherland-Hodgman clip of ``subject`` against the half-planes of ``clip``."""
    output = list(subject.vertices)
    clip_pts = clip.vertices
    if not output or len(clip_pts) < 3:
        return Polygon2D(())

    cp1 = clip_pts[-1]
    for cp2 in clip_pts:
        if not output:
            break
        ex, ez = cp2[0] - cp1[0], cp2[1] - cp1[1]

        def side(p: Point) -> float:
            return ex * (p[1] - cp1[1]) - ez * (p[0] - cp1[0])

        inputs = output
        output = []
        s = inputs[-1]
        s_side = side(s)
        for e in inputs:
            e_side = side(e)
            if e_side >= -GEOMETRY_EPS:
                if s_side < -GEOMETRY_EPS:
                    output.append(_crossing(s, e, s_side, e_side))
                output.append(e)
            elif s_side >= -GEOMETRY_EPS:
                output.append(_crossing(s, e, s_side, e_side))
            s, s_side = e, e_side
        cp1 = cp2
    return Polygon2D(tuple(output))


def _crossing(s: Point, e: Point, s_side: float, e_side: float) -> Point:
    t = s_side / (s_side - e_side)
    return (s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1]))


def vertical_overlap(top_a: float, h_a: float, top_b: float, h_b: float) -> float:
    return max(0.0, min(top_a, top_b) - max(top_a - h_a, top_b - h_b))


def exact_iou_3d(a: Box3D, b: Box3D) -> float:
    h_overlap = vertical_overlap(a.y, a.h, b.y, b.h)
    if h_overlap <= 0.0:
        return 0.0
    area = polygon_area(clip_convex(box_corners_2d(a), box_corners_2d(b)))
    intersection = h_overlap * area
    union = a.volume + b.volume - intersection
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, intersection / union))


def y_overlap_bound(y_lo: float, y_hi: float, h_hat: float, y_gt: float, h_gt: float) -> float:
    """Smallest vertical overlap of ``[y' - h_hat, y']`` with the ground-truth span.

    The overlap is concave in ``y'``, so its minimum over ``[y_lo, y_hi]`` sits
    on an endpoint; both are evaluated, which covers the farther-endpoint rule.
    """
    if y_lo > y_hi:
        raise InputError(f"y_overlap_bound: y_lo {y_lo} exceeds y_hi {y_hi}")
    if h_hat <= 0 or h_gt <= 0:
        raise InputError("y_overlap_bound: heights must be positive")
    return min(
        vertical_overlap(y_lo, h_hat, y_gt, h_gt),
        vertical_overlap(y_hi, h_hat, y_gt, h_gt),
    )


def _trig_range(lo: float, hi: float, phase: float, critical: float) -> tuple[float, float]:
    """Range of cos(t + phase) (critical=0) or sin(t + phase) (critical=pi/2) over [lo, hi]."""
    fn = math.cos if critical == 0.0 else math.sin
    values = [fn(lo + phase), fn(hi + phase)]
    first = math.ceil((lo + phase - critical) / math.pi)
    last = math.floor((hi + phase - critical) / math.pi)
    for m in range(first, last + 1):
        values.append(1.0 if m % 2 == 0 else -1.0)
    return min(values), max(values)


def corner_envelope(
    x_lo: float,
    z_lo: float,
    r_lo: float,
    x_hi: float,
    z_hi: float,
    r_hi: float,
    w: float,
    l: float,
) -> Polygon2D:
    """Convex region holding every footprint with (x, z, r) in the given ranges.

    Each footprint corner stays inside an axis-aligned rectangle obtained from
    the exact extrema of its rotated offset; the hull of the 16 rectangle
    corners therefore contains every footprint.
    """
    if x_lo > x_hi or z_lo > z_hi or r_lo > r_hi:
        raise InputError("corner_envelope: every lower bound must be <= its upper bound")
    if r_hi - r_lo >= TWO_PI:
        raise InputError("corner_envelope: rotation interval must be narrower than 2*pi")
    if w <= 0 or l <= 0:
        raise InputError("corner_envelope: w and l must be positive")

    points = []
    for sx, sz in _CORNER_SIGNS:
        a, b = sx * w / 2.0, sz * l / 2.0
        radius = math.hypot(a, b)
        phase = math.atan2(b, a)
        c_min, c_max = _trig_range(r_lo, r_hi, phase, 0.0)
        s_min, s_max = _trig_range(r_lo, r_hi, phase, math.pi / 2.0)
        xs = (x_lo + radius * c_min, x_hi + radius * c_max)
        zs = (z_lo + radius * s_min, z_hi + radius * s_max)
        points.extend((px, pz) for px in xs for pz in zs)
    return convex_hull(points)


def _area_outside(region: Polygon2D, target: Polygon2D) -> float:
    return polygon_area(region) - polygon_area(clip_convex(region, target))


# Starting sizes for the inner footprint search, as fractions of the lower sizes.
_SIZE_FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)


def inner_overlap_bound(interval: BoxInterval, gt_footprint: Polygon2D) -> float:
    """Lower bound on the footprint overlap of any box in ``interval`` with ``gt_footprint``.

    Every such box covers the ``w' x l'`` footprint at its own center and
    heading whenever ``w' <= w_lo`` and ``l' <= l_lo``, so each of those sizes
    yields a valid bound ``w' l' - area(envelope(w', l') outside gt)``. The
    largest one is kept: the lower-size corner plus a bounded search.
    """
    x_lo, _, z_lo, w_lo, _, l_lo, r_lo = interval.lo
    x_hi, _, z_hi, _, _, _, r_hi = interval.hi
    w_min, l_min = w_lo * 1e-3, l_lo * 1e-3

    def overlap(size) -> float:
        w = min(max(float(size[0]), w_min), w_lo)
        l = min(max(float(size[1]), l_min), l_lo)
        envelope = corner_envelope(x_lo, z_lo, r_lo, x_hi, z_hi, r_hi, w, l)
        return w * l - _area_outside(envelope, gt_footprint)

    best = overlap((w_lo, l_lo))
    # A fixed pose or a footprint already inside gt cannot do better than the corner.
    if (x_lo == x_hi and z_lo == z_hi and r_lo == r_hi) or best >= w_lo * l_lo - GEOMETRY_EPS:
        return best

    start = (w_lo, l_lo)
    for fw in _SIZE_FRACTIONS:
        for fl in _SIZE_FRACTIONS:
            size = (fw * w_lo, fl * l_lo)
            value = overlap(size)
            if value > best:
                best, start = value, size
    result = minimize(
        lambda size: -overlap(size),
        np.array(start),
        method="Powell",
        bounds=[(w_min, w_lo), (l_min, l_lo)],
        options={"xtol": 1e-6, "ftol": 1e-10},
    )
    return max(best, overlap(result.x))


def iou_lower_bound(interval: BoxInterval, gt: Box3D) -> float:
    """Certified lower bound on IoU(b, gt) over every box b inside ``interval``."""
    if not isinstance(interval, BoxInterval):
        raise InputError("iou_lower_bound: interval must be a BoxInterval")
    x_lo, y_lo, z_lo, w_lo, h_lo, l_lo, r_lo = interval.lo
    x_hi, y_hi, z_hi, w_hi, h_hi, l_hi, r_hi = interval.hi
    gt_footprint = box_corners_2d(gt)

    intersection = 0.0
    h1 = y_overlap_bound(y_lo, y_hi, h_lo, gt.y, gt.h)
    if h1 > 0.0:
        overlap = inner_overlap_bound(interval, gt_footprint)
        if overlap > 0.0:
            intersection = h1 * overlap

    union = gt.volume + h_hi * w_hi * l_hi
    h2 = y_overlap_bound(y_lo, y_hi, h_hi, gt.y, gt.h)
    if h2 > 0.0:
        outer = corner_envelope(x_lo, z_lo, r_lo, x_hi, z_hi, r_hi, w_hi, l_hi)
        overlap = w_hi * l_hi - _area_outside(outer, gt_footprint)
        if overlap > 0.0:
            union -= h2 * overlap

    if intersection <= 0.0 or union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, intersection / union))
