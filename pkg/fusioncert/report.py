import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

from fusioncert.defaults import REPORT_HEADER
from fusioncert.errors import InputError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReportRow:
    scene: str
    transform: str
    radius: str
    metric: str
    certified: Optional[float]
    empirical: Optional[float]
    clean: Optional[float]
    runtime_s: float
    cells: int
    n: int
    alpha: float

    def as_dict(self) -> dict:
        return dict(zip(REPORT_HEADER, self.cells_text()))

    def cells_text(self) -> list[str]:
        return [
            self.scene,
            self.transform,
            self.radius,
            self.metric,
            fmt(self.certified),
            fmt(self.empirical),
            fmt(self.clean),
            fmt(self.runtime_s),
            str(self.cells),
            str(self.n),
            fmt(self.alpha),
        ]


def fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6f}"


def metric_name(metric: str, threshold: float, vanilla: bool = False, modality: Optional[str] = None) -> str:
    """Det@80 for a detection threshold of 0.8, AP@50 for an IoU threshold of 0.5.

    Unsmoothed attack rows get a ``Vanilla`` prefix; a modality other than
    the default fusion is appended after a colon, as in ``Det@80:lidar``.
    """
    prefix = "Det" if metric == "detection" else "AP"
    name = f"{'Vanilla' if vanilla else ''}{prefix}@{round(threshold * 100):d}"
    return f"{name}:{modality}" if modality else name


def metric_threshold(name: str) -> float:
    """Inverse of the threshold part of :func:`metric_name`."""
    try:
        return int(name.split("@", 1)[1].split(":", 1)[0]) / 100.0
    except (IndexError, ValueError):
        raise InputError(f"metric: cannot read a threshold from {name!r}") from None


def write_report(rows: Sequence[ReportRow], path: Union[str, Path]) -> None:
    if not rows:
        raise InputError("report: need at least one row")
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for row in rows:
            writer.writerow(row.cells_text())
    logger.info("wrote %d report rows to %s", len(rows), path)
