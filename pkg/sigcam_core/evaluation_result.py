"""
Result containers shared by the synthetic dataset, metrics and reports.

``BBox`` is the inclusive-exclusive pixel box used everywhere; the record
classes collect the per-image terms that the split-level metrics reduce.
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from config.constants import FIDELITY_MIN_SCORE, REPORT_METRIC_COLUMNS
from .errors import ContractError


@dataclass(frozen=True)
class BBox:
    """Pixel box, x0/y0 inclusive and x1/y1 exclusive."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ContractError(f"degenerate box {self.as_tuple()}")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_tuple(self) -> Tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "BBox":
        """Tight box around the set pixels of a binary mask."""
        ys, xs = np.nonzero(mask)
        if ys.size == 0:
            raise ContractError("cannot box an empty mask")
        return cls(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)

    def to_mask(self, height: int, width: int) -> np.ndarray:
        mask = np.zeros((height, width), dtype=bool)
        mask[self.y0:self.y1, self.x0:self.x1] = True
        return mask


@dataclass
class FidelityRecord:
    """Class score on the full image (Y) and on the explanation image (O)."""

    full_score: float
    explanation_score: float

    @property
    def drop(self) -> Optional[float]:
        """max(0, Y - O) / Y, or None when Y is too small to divide by."""
        if self.full_score <= FIDELITY_MIN_SCORE:
            return None
        return max(0.0, self.full_score - self.explanation_score) / self.full_score

    @property
    def increased(self) -> bool:
        return self.explanation_score > self.full_score


@dataclass
class WsolRecord:
    """Per-image localization terms."""

    correct: bool
    loc_iou: float             # best IoU at the GT-known threshold
    located: bool
    iou_curve: np.ndarray      # best IoU at every threshold of the sweep


@dataclass
class EvalRecord:
    """Prediction, heatmap and ground truth for one evaluated image."""

    index: int
    label: int
    predicted: int
    heatmap: np.ndarray
    gt_box: BBox
    gt_mask: np.ndarray
    wsol: Optional[WsolRecord] = None

    @property
    def correct(self) -> bool:
        return self.predicted == self.label


class ExperimentResult:
    """One metrics row of the evaluation matrix plus its run metadata."""

    def __init__(self,
                 method: str,
                 branch: str,
                 nwc: bool,
                 pos_weight_mode: str,
                 metrics: Dict[str, float],
                 timings: Optional[Dict[str, float]] = None,
                 notes: Optional[List[str]] = None):
        self.method = method
        self.branch = branch
        self.nwc = nwc
        self.pos_weight_mode = pos_weight_mode
        self.metrics = metrics
        self.timings = timings or {}
        self.notes = notes or []

    def row(self) -> Dict[str, Any]:
        """Flat CSV row: key columns then metric columns."""
        row: Dict[str, Any] = {
            "method": self.method,
            "branch": self.branch,
            "nwc": int(self.nwc),
            "pos_weight_mode": self.pos_weight_mode,
        }
        for column in REPORT_METRIC_COLUMNS:
            row[column] = self.metrics.get(column, float("nan"))
        return row

    def __str__(self) -> str:
        return f"ExperimentResult({self.method}, {self.branch}, nwc={self.nwc})"

    def __repr__(self) -> str:
        return (f"ExperimentResult(method='{self.method}', branch='{self.branch}', "
                f"nwc={self.nwc}, pos_weight_mode='{self.pos_weight_mode}')")
