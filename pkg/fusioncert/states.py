from typing import TypedDict, List, Annotated, Any, Optional
import operator
from dataclasses import dataclass

import numpy as np

from fusioncert.config import SmoothingConfig
from fusioncert.geometry import Box3D, BoxInterval
from fusioncert.scene import Scene
from fusioncert.smoothing import PercentilePair
from fusioncert.transforms import Cell, InterpError, ParamGrid


@dataclass(frozen=True)
class CellPlan:
    """Everything about a cell that is known before sampling."""

    cell: Cell
    interp: InterpError
    percentiles: PercentilePair
    alpha: float
    k_lo: Optional[int]
    k_hi: Optional[int]
    mode: str

    @property
    def certifiable(self) -> bool:
        if self.mode == "iou":
            return self.k_lo is not None and self.k_hi is not None
        return self.k_lo is not None


@dataclass(frozen=True)
class CellDraw:
    """Order statistics picked from one cell's samples."""

    index: int
    lo: np.ndarray
    hi: Optional[np.ndarray]
    gt: Optional[Box3D] = None


@dataclass(frozen=True)
class CellBound:
    plan: CellPlan
    value: Optional[float]
    upper: Optional[float] = None
    interval: Optional[BoxInterval] = None
    gt: Optional[Box3D] = None

    @property
    def certifiable(self) -> bool:
        return self.value is not None

    @property
    def cell(self) -> Cell:
        return self.plan.cell


class CertifyState(TypedDict):
    mode: str
    kind: str
    scene: Scene
    grid: ParamGrid
    cfg: SmoothingConfig
    detector: Any
    gt: Box3D
    workers: int
    show_progress: bool
    plans: List[CellPlan]
    clean_value: float
    draws: Annotated[List[CellDraw], operator.add]
    bounds: Annotated[List[CellBound], operator.add]
    certified: float
    upper: float
    uncertifiable: int
    messages: Annotated[List[str], operator.add]
