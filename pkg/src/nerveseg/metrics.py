"""
=======
Metrics
=======

Thresholding, dice overlap and the per-subject dice report.

Masks are 2-D ``uint8`` arrays holding only 0 and 1. A report row is the mean
dice of one subject under one architecture across all runs in which that
subject was the test subject; the report average is the mean of its rows.

"""

from collections.abc import Iterable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd
from scipy import ndimage

from nerveseg.exceptions import DomainError, ShapeError
from nerveseg.types import MaskArray, Tensor

THRESHOLD = 0.5
CSV_FLOAT_FORMAT = "%.4f"


def binarize(prob: Tensor, threshold: float = THRESHOLD) -> MaskArray:
    """Converts a probability map to a mask; ``p >= threshold`` becomes 1.

    Parameters
    ----------
    prob
        Probabilities of shape (H, W) or (1, 1, H, W).

    Raises
    ------
    DomainError
        If any value lies outside [0, 1].

    """
    prob = np.asarray(prob)
    if prob.ndim == 4:
        if prob.shape[:2] != (1, 1):
            raise ShapeError(f"binarize takes one map, got shape {prob.shape}.", "prob")
        prob = prob[0, 0]
    if prob.ndim != 2:
        raise ShapeError(f"binarize takes (H, W) or (1, 1, H, W), got {prob.shape}.", "prob")
    if prob.size and (np.isnan(prob).any() or prob.min() < 0 or prob.max() > 1):
        raise DomainError("Probabilities must lie in [0, 1].", "prob")
    return (prob >= threshold).astype(np.uint8)


def dice(pred: MaskArray, truth: MaskArray) -> float:
    """``2 |pred & truth| / (|pred| + |truth|)``; two empty masks score 1.0."""
    if pred.shape != truth.shape:
        raise ShapeError(f"dice needs equal dims, got {pred.shape} and {truth.shape}.")
    pred_b = pred.astype(bool)
    truth_b = truth.astype(bool)
    total = int(pred_b.sum()) + int(truth_b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred_b, truth_b).sum()) / total


def count_components(mask: MaskArray) -> int:
    """Number of 8-connected foreground regions in ``mask``."""
    _, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    return int(count)


@dataclass(frozen=True)
class ReportRow:
    subject: str
    arch: str
    mean_dice: float


@dataclass
class DiceReport:
    """Per-subject mean dice for each architecture plus per-architecture averages."""

    rows: list[ReportRow] = field(default_factory=list)
    averages: dict[str, float] = field(default_factory=dict)

    def value(self, subject: str, arch: str) -> float:
        for row in self.rows:
            if row.subject == subject and row.arch == arch:
                return row.mean_dice
        raise KeyError(f"No report row for subject {subject} and arch {arch}.")

    def to_frame(self) -> pd.DataFrame:
        records = [(row.subject, row.arch, row.mean_dice) for row in self.rows]
        records += [("average", arch, value) for arch, value in self.averages.items()]
        return pd.DataFrame.from_records(records, columns=["subject", "arch", "mean_dice"])

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)

    def side_by_side(self) -> pd.DataFrame:
        """Subjects as rows and architectures as columns, with the average last."""
        table = self.to_frame().pivot(index="subject", columns="arch", values="mean_dice")
        order = [row.subject for row in self.rows]
        order = list(dict.fromkeys(order)) + ["average"]
        return table.reindex(index=order, columns=list(self.averages))


def aggregate_report(per_run: Iterable[tuple[object, str, float]]) -> DiceReport:
    """Averages run-level dice per (subject, arch), then rows per arch.

    Rows follow the order in which subjects first appear; architectures within
    a subject follow the order in which they first appear.

    Raises
    ------
    DomainError
        If there are no runs at all, or some subject lacks runs for an
        architecture other subjects have.

    """
    groups: dict[tuple[str, str], list[float]] = {}
    subjects: dict[str, None] = {}
    archs: dict[str, None] = {}
    for subject, arch, value in per_run:
        key = (str(subject), str(arch))
        groups.setdefault(key, []).append(float(value))
        subjects.setdefault(key[0])
        archs.setdefault(key[1])
    if not groups:
        raise DomainError("Cannot build a dice report from zero runs.", "per_run")
    missing = [(s, a) for s in subjects for a in archs if (s, a) not in groups]
    if missing:
        subject, arch = missing[0]
        raise DomainError(f"Subject {subject} has no {arch} runs.", "per_run")

    rows = [
        ReportRow(subject, arch, float(np.mean(groups[(subject, arch)])))
        for subject in subjects
        for arch in archs
    ]
    averages = {
        arch: float(np.mean([row.mean_dice for row in rows if row.arch == arch])) for arch in archs
    }
    return DiceReport(rows=rows, averages=averages)
