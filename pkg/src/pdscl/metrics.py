"""ICBHI-style two-class scoring (specificity, sensitivity, their mean) and ROC/AUC."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from pdscl.core import ABNORMAL, FINE_LABELS, NORMAL


@dataclass
class MetricsCounts:
    c_n: int
    n_n: int
    c_ab: int
    n_ab: int
    per_fine: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0 <= self.c_n <= self.n_n and 0 <= self.c_ab <= self.n_ab):
            raise ValueError("correct counts must lie in [0, total]")

    def __add__(self, other):
        fine = dict(self.per_fine)
        for k, (c, n) in other.per_fine.items():
            c0, n0 = fine.get(k, (0, 0))
            fine[k] = (c0 + c, n0 + n)
        return MetricsCounts(self.c_n + other.c_n, self.n_n + other.n_n,
                             self.c_ab + other.c_ab, self.n_ab + other.n_ab, fine)


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    fpr: float
    tpr: float


def confusion_counts(labels, preds, fine_labels: Sequence[str] | None = None) -> MetricsCounts:
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    if labels.shape != preds.shape:
        raise ValueError("labels and predictions differ in length")
    correct = labels == preds
    per_fine = {}
    if fine_labels is not None:
        fine = np.asarray(fine_labels)
        for name in FINE_LABELS:
            sel = fine == name
            if sel.any():
                per_fine[name] = (int(correct[sel].sum()), int(sel.sum()))
    return MetricsCounts(
        c_n=int(correct[labels == NORMAL].sum()), n_n=int((labels == NORMAL).sum()),
        c_ab=int(correct[labels == ABNORMAL].sum()), n_ab=int((labels == ABNORMAL).sum()),
        per_fine=per_fine,
    )


def sp_se_sc(counts: MetricsCounts):
    """(Sp, Se, Sc): normal recall, abnormal recall, and their mean."""
    if counts.n_n == 0 or counts.n_ab == 0:
        raise ValueError("both classes must be present to score Sp/Se")
    sp = counts.c_n / counts.n_n
    se = counts.c_ab / counts.n_ab
    return sp, se, (sp + se) / 2


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-D sequences")
    if not np.all(np.isin(labels, (NORMAL, ABNORMAL))):
        raise ValueError("labels must be 0 (normal) or 1 (abnormal)")
    n_pos = int(np.sum(labels == ABNORMAL))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC/AUC need both classes present")
    return scores, labels, n_pos, n_neg


def roc_curve(scores, labels) -> list[RocPoint]:
    """ROC from (0, 0) to (1, 1), one point per distinct score (ties grouped).

    A sample is called abnormal when ``score >= threshold``. The start point
    uses threshold ``+inf``.
    """
    scores, labels, n_pos, n_neg = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y == ABNORMAL)
    fp = np.cumsum(y == NORMAL)
    # last index of each tie group
    last = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    points = [RocPoint(float("inf"), 0.0, 0.0)]
    points += [RocPoint(float(s[i]), fp[i] / n_neg, tp[i] / n_pos) for i in last]
    return points


def trapezoid_auc(points: Sequence[RocPoint]) -> float:
    fpr = np.array([p.fpr for p in points])
    tpr = np.array([p.tpr for p in points])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def auc(scores, labels) -> float:
    """Area under the ROC via the trapezoid rule (equals the Mann-Whitney concordance)."""
    return trapezoid_auc(roc_curve(scores, labels))


def concordance_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_abnormal > score_normal) + 0.5 P(tie), counted by ranks."""
    scores, labels, n_pos, n_neg = _check_binary(scores, labels)
    from scipy.stats import rankdata

    ranks = rankdata(scores)
    u = ranks[labels == ABNORMAL].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def write_roc_csv(path, points: Sequence[RocPoint]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for p in points:
            w.writerow([repr(p.threshold), repr(p.fpr), repr(p.tpr)])


def predictions_report(labels, scores, preds, fine_labels=None) -> dict:
    """Sp/Se/Sc, AUC and confusion counts for one set of predictions.

    Ratios that are undefined because a class is absent come back as ``None``.
    """
    counts = confusion_counts(labels, preds, fine_labels)
    sp = counts.c_n / counts.n_n if counts.n_n else None
    se = counts.c_ab / counts.n_ab if counts.n_ab else None
    both = counts.n_n > 0 and counts.n_ab > 0
    return {
        "sp": sp, "se": se,
        "sc": sp_se_sc(counts)[2] if both else None,
        "auc": auc(scores, labels) if both else None,
        "counts": {"c_n": counts.c_n, "n_n": counts.n_n, "c_ab": counts.c_ab, "n_ab": counts.n_ab},
        "per_fine_recall": {k: {"correct": c, "total": n} for k, (c, n) in counts.per_fine.items()},
    }
