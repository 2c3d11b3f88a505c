import os
import logging
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from fusioncert.defaults import (
    DEFAULT_ALPHA,
    DEFAULT_ETA,
    DEFAULT_IOU_THRESHOLD,
    DEFAULT_SAMPLES,
    DETECTOR_TIMEOUT_S,
    MODALITIES,
)

env_path = Path(__file__).resolve().parents[1] / ".env"
load_dotenv(env_path, override=False)

logger = logging.getLogger(__name__)


def env_threads() -> int:
    try:
        return max(1, int(os.getenv("FUSIONCERT_THREADS", "1")))
    except ValueError:
        logger.warning("FUSIONCERT_THREADS is not an integer, using 1")
        return 1


def env_detector_timeout() -> float:
    try:
        return float(os.getenv("FUSIONCERT_DETECTOR_TIMEOUT", str(DETECTOR_TIMEOUT_S)))
    except ValueError:
        logger.warning("FUSIONCERT_DETECTOR_TIMEOUT is not a number, using %s", DETECTOR_TIMEOUT_S)
        return DETECTOR_TIMEOUT_S


def env_log_level() -> str:
    return os.getenv("FUSIONCERT_LOG_LEVEL", "WARNING").upper()


def env_db_path() -> str:
    return os.getenv("FUSIONCERT_DB", "runs.sqlite")


class SmoothingConfig(BaseModel):
    """Noise levels, sample count and failure probability of one smoothing run.

    sigma_x is in pixel-intensity units, sigma_p in meters; alpha is the
    failure probability the caller spends on the whole run.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    sigma_x: float = Field(gt=0, allow_inf_nan=False)
    sigma_p: float = Field(gt=0, allow_inf_nan=False)
    n: int = Field(default=DEFAULT_SAMPLES, ge=2)
    alpha: float = Field(default=DEFAULT_ALPHA, gt=0, lt=1)
    seed: int = Field(default=0, ge=0, lt=2**64)


class DetectorSpec(BaseModel):
    """Which detector to run: the builtin geometric one or an external process."""

    model_config = ConfigDict(extra="forbid")

    kind: str = "builtin"
    command: Optional[list[str]] = None
    timeout: float = Field(default_factory=env_detector_timeout, gt=0)
    pool_size: int = Field(default=1, ge=1)

    @field_validator("kind")
    @classmethod
    def _known_kind(cls, value: str) -> str:
        if value not in ("builtin", "external"):
            raise ValueError("must be 'builtin' or 'external'")
        return value

    @model_validator(mode="after")
    def _external_needs_command(self):
        if self.kind == "external" and not self.command:
            raise ValueError("command: required for an external detector")
        return self


class BuiltinDetectorConfig(BaseModel):
    """Constants of the geometric detector, frozen once tuned.

    Score is sigmoid(score_a * points + score_b * patch_intensity + score_c).
    ``modality`` drops the image term ("lidar") or the point-count term
    ("camera"); boxes always come from the LiDAR cluster.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    modality: str = "fusion"
    ground_band: float = Field(default=0.3, gt=0, le=1)
    ground_eps: float = Field(default=0.25, gt=0)
    cell_size: float = Field(default=0.5, gt=0)
    min_cluster_points: int = Field(default=15, ge=3)
    car_min_length: float = Field(default=2.0, gt=0)
    score_a: float = 0.015
    score_b: float = 4.0
    score_c: float = -2.0
    extent_percentiles: tuple[float, float] = (2.0, 98.0)
    max_range: float = Field(default=60.0, gt=0)
    min_size: float = Field(default=0.1, gt=0)

    @field_validator("modality")
    @classmethod
    def _known_modality(cls, value: str) -> str:
        if value not in MODALITIES:
            raise ValueError(f"must be one of {', '.join(MODALITIES)}")
        return value


class RunConfig(BaseModel):
    """One CLI or backend run. Ranges and steps use degrees on rotation axes."""

    model_config = ConfigDict(extra="forbid")

    scene: Optional[str] = None
    transform: str = "rotation"
    ranges: Optional[list[tuple[float, float]]] = None
    grid: Optional[list[int]] = None
    anchor: str = "lower"
    samples: int = Field(default=DEFAULT_SAMPLES, ge=2)
    sigma_x: Optional[float] = Field(default=None, gt=0)
    sigma_p: Optional[float] = Field(default=None, gt=0)
    alpha: float = Field(default=DEFAULT_ALPHA, gt=0, lt=1)
    seed: int = Field(default=0, ge=0, lt=2**64)
    eta: list[float] = Field(default_factory=lambda: [DEFAULT_ETA])
    iou_threshold: list[float] = Field(default_factory=lambda: [DEFAULT_IOU_THRESHOLD])
    radii: Optional[list[float]] = None
    strategy: str = "sparse"
    attack_step: Optional[float] = Field(default=None, gt=0)
    vanilla: bool = False
    modalities: Optional[list[str]] = None
    detector: DetectorSpec = Field(default_factory=DetectorSpec)
    builtin: BuiltinDetectorConfig = Field(default_factory=BuiltinDetectorConfig)
    out: Optional[str] = None
    threads: int = Field(default_factory=env_threads, ge=1)
    timing: bool = False

    @field_validator("anchor")
    @classmethod
    def _known_anchor(cls, value: str) -> str:
        if value not in ("lower", "random"):
            raise ValueError("must be 'lower' or 'random'")
        return value

    @field_validator("strategy")
    @classmethod
    def _known_strategy(cls, value: str) -> str:
        if value not in ("sparse", "dense"):
            raise ValueError("must be 'sparse' or 'dense'")
        return value

    @field_validator("eta", "iou_threshold")
    @classmethod
    def _unit_thresholds(cls, value: list[float]) -> list[float]:
        if not value or any(not 0.0 <= v <= 1.0 for v in value):
            raise ValueError("thresholds must lie in [0, 1]")
        return value

    @field_validator("modalities")
    @classmethod
    def _known_modalities(cls, value):
        if value is not None and (not value or any(m not in MODALITIES for m in value)):
            raise ValueError(f"each must be one of {', '.join(MODALITIES)}")
        return value

    @field_validator("ranges")
    @classmethod
    def _ordered_ranges(cls, value):
        if value is not None:
            for lo, hi in value:
                if lo > hi:
                    raise ValueError(f"lower bound {lo} exceeds upper bound {hi}")
        return value

    def smoothing(self, sigma_default: float) -> SmoothingConfig:
        return SmoothingConfig(
            sigma_x=self.sigma_x if self.sigma_x is not None else sigma_default,
            sigma_p=self.sigma_p if self.sigma_p is not None else sigma_default,
            n=self.samples,
            alpha=self.alpha,
            seed=self.seed,
        )
