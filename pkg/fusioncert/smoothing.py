"""Median (percentile) smoothing statistics.

Noisy samples are drawn with one counter-based generator per sample, keyed on
``(seed, *stream, sample_index)``. Results therefore do not depend on the order
in which samples are evaluated or on how many worker threads evaluate them.
"""

import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import binom, norm

from fusioncert.config import SmoothingConfig
from fusioncert.errors import DomainError, InputError, SamplingError
from fusioncert.scene import Scene

logger = logging.getLogger(__name__)

_UINT64 = (1 << 64) - 1
_KEY_SCALE = 1e9


def std_normal_cdf(t: float) -> float:
    return float(norm.cdf(t))


def std_normal_quantile(p: float) -> float:
    if not (0.0 < p < 1.0):
        raise DomainError(f"std_normal_quantile: p must lie in (0, 1), got {p}")
    return float(norm.ppf(p))


@dataclass(frozen=True)
class PercentilePair:
    q: float
    q_lo: float
    q_hi: float

    def __post_init__(self):
        if not (self.q_lo <= self.q <= self.q_hi):
            raise InputError(f"percentiles out of order: {self.q_lo} <= {self.q} <= {self.q_hi}")


def shifted_percentiles(
    q: float, m_x: float, m_p: float, sigma_x: float, sigma_p: float
) -> PercentilePair:
    """Percentiles reachable at a transformed input whose anchors lie within (m_x, m_p)."""
    if not (0.0 < q < 1.0):
        raise DomainError(f"shifted_percentiles: q must lie in (0, 1), got {q}")
    if m_x < 0 or m_p < 0:
        raise InputError("shifted_percentiles: interpolation errors must be >= 0")
    if sigma_x <= 0 or sigma_p <= 0:
        raise InputError("shifted_percentiles: sigmas must be positive")
    eps = math.sqrt((m_x / sigma_x) ** 2 + (m_p / sigma_p) ** 2)
    if eps == 0.0:
        return PercentilePair(q, q, q)
    center = std_normal_quantile(q)
    return PercentilePair(q, std_normal_cdf(center - eps), std_normal_cdf(center + eps))


def order_statistic_indices(
    n: int, p_lo: float, p_hi: float, alpha: float
) -> tuple[Optional[int], Optional[int]]:
    """1-indexed order statistics bounding the p_lo / p_hi quantiles.

    ``k_lo`` is the largest k with Pr[Bin(n, p_lo) >= k] >= 1 - alpha, so
    X_(k_lo) <= theta_{p_lo} with probability >= 1 - alpha. ``k_hi`` is the
    smallest k with Pr[Bin(n, p_hi) <= k - 1] >= 1 - alpha. ``None`` means no
    order statistic carries the guarantee.
    """
    if n < 1:
        raise InputError(f"order_statistic_indices: n must be >= 1, got {n}")
    if not (0.0 < p_lo <= p_hi < 1.0):
        raise InputError(f"order_statistic_indices: need 0 < p_lo <= p_hi < 1, got {p_lo}, {p_hi}")
    if not (0.0 < alpha < 1.0):
        raise InputError(f"order_statistic_indices: alpha must lie in (0, 1), got {alpha}")

    ks = np.arange(1, n + 1)
    # binom.sf / binom.cdf go through the regularized incomplete beta function.
    below = np.nonzero(binom.sf(ks - 1, n, p_lo) >= 1.0 - alpha)[0]
    above = np.nonzero(binom.cdf(ks - 1, n, p_hi) >= 1.0 - alpha)[0]
    k_lo = int(ks[below[-1]]) if below.size else None
    k_hi = int(ks[above[0]]) if above.size else None
    return k_lo, k_hi


def percentile_indices(
    n: int, pair: PercentilePair, alpha: float
) -> tuple[Optional[int], Optional[int]]:
    """order_statistic_indices with saturated percentiles mapped to ``None``."""
    p_lo = pair.q_lo if pair.q_lo > 0.0 else None
    p_hi = pair.q_hi if pair.q_hi < 1.0 else None
    if p_lo is None and p_hi is None:
        return None, None
    k_lo, _ = order_statistic_indices(n, p_lo, p_lo, alpha) if p_lo is not None else (None, None)
    _, k_hi = order_statistic_indices(n, p_hi, p_hi, alpha) if p_hi is not None else (None, None)
    return k_lo, k_hi


def split_budget(alpha: float, parts: int) -> float:
    """Per-part failure probability whose ``parts``-fold sum never exceeds ``alpha``."""
    if parts < 1:
        raise InputError("split_budget: parts must be >= 1")
    share = alpha / parts
    while Fraction(share) * parts > Fraction(alpha):
        share = math.nextafter(share, 0.0)
    return share


@dataclass(frozen=True)
class SampleVector:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1:
            raise InputError("SampleVector: values must be one-dimensional")
        if values.size > 1 and np.any(values[1:] < values[:-1]):
            values = np.sort(values)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.values.size)

    def order_statistic(self, k: int) -> float:
        """X_(k), 1-indexed."""
        if not (1 <= k <= len(self)):
            raise InputError(f"order statistic {k} outside 1..{len(self)}")
        return float(self.values[k - 1])


def stream_key(*parts: float) -> tuple[int, ...]:
    """Map stream identifiers (cell anchors, tags) to SeedSequence entropy words."""
    words = []
    for part in parts:
        if isinstance(part, (int, np.integer)):
            words.append(int(part) & _UINT64)
        else:
            words.append(int(round(float(part) * _KEY_SCALE)) & _UINT64)
    return tuple(words)


def sample_rng(seed: int, stream: Sequence[int], index: int) -> np.random.Generator:
    sequence = np.random.SeedSequence([int(seed), *stream, int(index)])
    return np.random.Generator(np.random.Philox(sequence))


def add_gaussian_noise(scene: Scene, cfg: SmoothingConfig, rng: np.random.Generator) -> Scene:
    image_noise = rng.normal(0.0, cfg.sigma_x, size=scene.image.shape)
    point_noise = rng.normal(0.0, cfg.sigma_p, size=scene.points.shape)
    return scene.perturbed(scene.image + image_noise, scene.points + point_noise)


def sample_outputs(
    statistic: Callable[[Scene], object],
    scene: Scene,
    cfg: SmoothingConfig,
    stream: Sequence[int] = (),
    workers: int = 1,
    cell: Optional[int] = None,
) -> np.ndarray:
    """Evaluate ``statistic`` on ``cfg.n`` noisy copies of ``scene``, in sample order."""

    def evaluate(index: int):
        noisy = add_gaussian_noise(scene, cfg, sample_rng(cfg.seed, stream, index))
        try:
            return statistic(noisy)
        except SamplingError:
            raise
        except Exception as exc:
            raise SamplingError(index, exc, cell) from exc

    if workers <= 1 or getattr(statistic, "serial", False):
        results = [evaluate(i) for i in range(cfg.n)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(evaluate, range(cfg.n)))
    return np.asarray(results, dtype=float)


def sample_statistics(
    statistic: Callable[[Scene], float],
    scene: Scene,
    cfg: SmoothingConfig,
    stream: Sequence[int] = (),
    workers: int = 1,
    cell: Optional[int] = None,
) -> SampleVector:
    values = sample_outputs(statistic, scene, cfg, stream, workers, cell)
    return SampleVector(np.sort(values.reshape(-1)))


def median_estimate(samples) -> float:
    values = samples.values if isinstance(samples, SampleVector) else np.sort(np.asarray(samples, dtype=float))
    if values.size == 0:
        raise InputError("median_estimate: no samples")
    return float(values[values.size // 2])


def coordinate_views(values) -> tuple[np.ndarray, np.ndarray]:
    """Column-sorted copies of an n x d sample matrix for lower and upper bounds.

    Missing samples (NaN rows) sort first in the lower view and last in the
    upper view, so they can only widen a bound.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 2 or values.shape[0] == 0:
        raise InputError("coordinate_views: expected a non-empty n x d matrix")
    missing = np.isnan(values)
    lo_view = np.sort(np.where(missing, -np.inf, values), axis=0)
    hi_view = np.sort(np.where(missing, np.inf, values), axis=0)
    return lo_view, hi_view


def median_vector(values) -> np.ndarray:
    lo_view, _ = coordinate_views(values)
    return lo_view[lo_view.shape[0] // 2]
