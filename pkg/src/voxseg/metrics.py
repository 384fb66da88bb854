"""Evaluation quantities: per-class dice, total kidney volume (TKV),
signed TKV percent error, MAPE, and the CSV reporting format.

Conventions documented here once:
- both-empty dice is 1.0 (perfectly predicted absence);
- percent error is signed for scatter output, absolute inside MAPE;
- cases with zero ground-truth TKV are excluded from MAPE and counted;
- "mean dice" averages per case first (no voxel pooling across cases).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

KIDNEY_CLASS_IDS = (1, 2)

METRICS_CSV_HEADER = ("case_id", "fold", "dice_left", "dice_right",
                      "dice_mean", "tkv_pred_mm3", "tkv_gt_mm3", "tkv_pct_err")


def _labels_of(volume_or_array) -> np.ndarray:
    data = getattr(volume_or_array, "data", volume_or_array)
    return np.asarray(data)


def dice_score(pred, gt, class_id: int) -> float:
    """2|P∩G| / (|P|+|G|) for one label; 1.0 when both sets are empty."""
    p = _labels_of(pred) == class_id
    g = _labels_of(gt) == class_id
    if p.shape != g.shape:
        raise ShapeError(
            f"dice_score: prediction {p.shape} vs ground truth {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


@dataclass
class DiceReport:
    """Per-class dice for one case."""

    per_class: dict  # class id -> dice in [0, 1]

    def __post_init__(self):
        for cls, value in self.per_class.items():
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"dice for class {cls} out of [0,1]: {value}")

    @property
    def mean_kidney(self) -> float:
        """Arithmetic mean of exactly the left and right kidney classes."""
        left, right = KIDNEY_CLASS_IDS
        return 0.5 * (self.per_class[left] + self.per_class[right])


def dice_report(pred, gt, class_ids) -> DiceReport:
    return DiceReport({c: dice_score(pred, gt, c) for c in class_ids})


def compute_tkv(labels, class_ids=KIDNEY_CLASS_IDS, spacing=None) -> float:
    """Combined volume of the given label classes in mm^3: voxel count
    times the voxel volume (product of spacings)."""
    data = _labels_of(labels)
    if spacing is None:
        spacing = getattr(labels, "spacing", None)
        if spacing is None:
            raise ValueError("compute_tkv: spacing required for bare arrays")
    voxel_mm3 = float(np.prod([float(s) for s in spacing]))
    count = int(np.isin(data, np.asarray(class_ids)).sum())
    return count * voxel_mm3


def tkv_percent_error(pred_mm3: float, gt_mm3: float) -> float:
    """Signed percent error; undefined (ValueError) when gt is zero."""
    if gt_mm3 <= 0:
        raise ValueError("tkv_percent_error undefined for gt <= 0")
    return 100.0 * (pred_mm3 - gt_mm3) / gt_mm3


@dataclass
class TkvResult:
    case_id: str
    tkv_pred_mm3: float
    tkv_gt_mm3: float

    def __post_init__(self):
        if self.tkv_pred_mm3 < 0 or self.tkv_gt_mm3 < 0:
            raise ValueError(f"{self.case_id}: TKV must be >= 0")

    @property
    def percent_error(self) -> float:
        return tkv_percent_error(self.tkv_pred_mm3, self.tkv_gt_mm3)


@dataclass
class TkvSummary:
    mape: float
    n_used: int
    n_excluded: int  # cases with gt == 0, which make percent error undefined


def summarize_tkv(results) -> TkvSummary:
    errors = []
    excluded = 0
    for r in results:
        if r.tkv_gt_mm3 <= 0:
            excluded += 1
            continue
        errors.append(abs(r.percent_error))
    if not errors:
        raise ValueError("summarize_tkv: no cases with positive ground truth")
    return TkvSummary(mape=float(np.mean(errors)), n_used=len(errors),
                      n_excluded=excluded)


def mape(results) -> float:
    """Mean absolute percent error over cases with positive ground truth."""
    return summarize_tkv(results).mape


@dataclass
class ConvergenceLog:
    """Append-only (epoch, validation mean kidney dice) series."""

    points: list = field(default_factory=list)

    def append(self, epoch: int, mean_kidney_dice: float) -> None:
        if self.points and epoch <= self.points[-1][0]:
            raise ValueError(
                f"epoch {epoch} not after last logged epoch {self.points[-1][0]}")
        self.points.append((int(epoch), float(mean_kidney_dice)))

    def write_csv(self, path) -> None:
        with open(os.fspath(path), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("epoch", "val_mean_kidney_dice"))
            for epoch, dice in self.points:
                writer.writerow((epoch, repr(dice)))


@dataclass
class CaseRow:
    """One metrics-CSV row; fields mirror the header exactly."""

    case_id: str
    fold: int
    dice_left: float
    dice_right: float
    dice_mean: float
    tkv_pred_mm3: float
    tkv_gt_mm3: float
    tkv_pct_err: float


def case_row(case_id: str, fold: int, report: DiceReport,
             tkv: TkvResult) -> CaseRow:
    left, right = KIDNEY_CLASS_IDS
    return CaseRow(
        case_id=case_id, fold=fold,
        dice_left=report.per_class[left], dice_right=report.per_class[right],
        dice_mean=report.mean_kidney,
        tkv_pred_mm3=tkv.tkv_pred_mm3, tkv_gt_mm3=tkv.tkv_gt_mm3,
        tkv_pct_err=(tkv.percent_error if tkv.tkv_gt_mm3 > 0 else float("nan")))


def write_metrics_csv(rows, path) -> None:
    """Deterministic CSV: header then one row per case, floats via repr so
    two identical runs produce byte-identical files."""
    with open(os.fspath(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_CSV_HEADER)
        for r in rows:
            writer.writerow((r.case_id, r.fold, repr(r.dice_left),
                             repr(r.dice_right), repr(r.dice_mean),
                             repr(r.tkv_pred_mm3), repr(r.tkv_gt_mm3),
                             repr(r.tkv_pct_err)))


def read_metrics_csv(path) -> list:
    with open(os.fspath(path), newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != METRICS_CSV_HEADER:
            raise ValueError(f"unexpected metrics header: {header}")
        rows = []
        for rec in reader:
            rows.append(CaseRow(case_id=rec[0], fold=int(rec[1]),
                                dice_left=float(rec[2]),
                                dice_right=float(rec[3]),
                                dice_mean=float(rec[4]),
                                tkv_pred_mm3=float(rec[5]),
                                tkv_gt_mm3=float(rec[6]),
                                tkv_pct_err=float(rec[7])))
    return rows
