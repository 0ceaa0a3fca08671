"""ROC/AUROC and filtering-power metrics."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auroc: float

    def rows(self):
        for x, y, t in zip(self.fpr, self.tpr, self.thresholds):
            yield float(x), float(y), float(t)


def roc_auroc(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """Threshold sweep over the distinct scores with trapezoidal AUROC.

    Segments with equal scores cross the threshold together, so ties add a
    diagonal segment to the curve (and count one half in the area).
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    if s.shape != y.shape or s.ndim != 1:
        raise ValidationError("scores and labels must be 1-D and of equal length")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("ROC needs at least one positive and one negative label")
    if n_pos + n_neg != y.size:
        raise ValidationError("labels must be 0 or 1")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last_of_run]
    fp = np.cumsum(1 - y)[last_of_run]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[last_of_run]]
    auroc = float(np.trapezoid(tpr, fpr))
    return RocCurve(fpr, tpr, thresholds, auroc)


PATHS = ("L1_normal", "L1_anomaly", "group_pruned_normal", "exact")


def filtering_power(paths: Iterable[str]) -> dict[str, float]:
    """Fraction of segments resolved on each path, plus the total ``fp``.

    ``fp`` is the share resolved without an exact divergence computation.
    """
    counts = Counter(paths)
    total = sum(counts.values())
    if total == 0:
        raise ValidationError("no filter decisions")
    unknown = set(counts) - set(PATHS)
    if unknown:
        raise ValidationError(f"unknown filter paths {sorted(unknown)}")
    out = {p: counts.get(p, 0) / total for p in PATHS}
    out["fp"] = 1.0 - out["exact"]
    return out
