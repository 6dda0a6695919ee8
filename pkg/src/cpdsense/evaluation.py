"""Post-processing and classification metrics."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .channel import Label

CLASS_ORDER = (Label.EMPTY, Label.ADULT, Label.CHILD)


class DegenerateRoc(ValueError):
    """ROC requested with only one class present."""


def smooth_probabilities(probs, window: int) -> np.ndarray:
    """Causal moving average over the last ``window`` probability vectors.

    Early steps average over what is available.  Rows are renormalised to sum
    to one to absorb rounding.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    p = np.asarray(probs, dtype=float)
    if p.ndim != 2:
        raise ValueError("expected a (time, class) array")
    if window == 1 or p.shape[0] == 0:
        return p.copy()
    csum = np.cumsum(np.vstack([np.zeros((1, p.shape[1])), p]), axis=0)
    t = np.arange(1, p.shape[0] + 1)
    lo = np.maximum(t - window, 0)
    out = (csum[t] - csum[lo]) / (t - lo)[:, None]
    return out / out.sum(axis=1, keepdims=True)


def argmax_flips(probs) -> int:
    """Number of time steps at which the argmax class changes."""
    decisions = np.argmax(np.asarray(probs), axis=1)
    return int(np.count_nonzero(decisions[1:] != decisions[:-1]))


@dataclass
class Metrics:
    accuracy: float
    f1: float
    tpr: float
    fpr: float
    precision: float
    macro_f1: float
    confusion: list[list[int]]
    num_samples: int
    roc_points: list[tuple[float, float, float]] = field(default_factory=list)
    auc: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(num: float, den: float) -> float:
    return float(num) / float(den) if den else 0.0


def _f1(precision: float, recall: float) -> float:
    return 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def confusion_matrix(predictions, labels, num_classes: int = 3) -> np.ndarray:
    """Rows are true classes, columns predictions, in :data:`CLASS_ORDER`."""
    cm = np.zeros((num_classes, num_classes), dtype=int)
    np.add.at(cm, (np.asarray(labels, dtype=int), np.asarray(predictions, dtype=int)), 1)
    return cm


def compute_metrics(predictions, labels) -> Metrics:
    """Accuracy, child-class TPR/FPR/precision/F1, macro-F1 and the confusion matrix.

    TPR is the fraction of child samples predicted as child; FPR is the
    fraction of empty-cabin samples predicted as child.
    """
    pred = np.asarray(predictions, dtype=int)
    lab = np.asarray(labels, dtype=int)
    if pred.size == 0:
        raise ValueError("no samples to evaluate")
    if pred.shape != lab.shape:
        raise ValueError("predictions and labels differ in length")
    cm = confusion_matrix(pred, lab)
    child, empty = int(Label.CHILD), int(Label.EMPTY)
    tp = cm[child, child]
    tpr = _ratio(tp, cm[child].sum())
    precision = _ratio(tp, cm[:, child].sum())
    fpr = _ratio(cm[empty, child], cm[empty].sum())
    per_class = [_f1(_ratio(cm[c, c], cm[:, c].sum()), _ratio(cm[c, c], cm[c].sum())) for c in range(3)]
    return Metrics(
        accuracy=_ratio(np.trace(cm), cm.sum()),
        f1=_f1(precision, tpr),
        tpr=tpr,
        fpr=fpr,
        precision=precision,
        macro_f1=float(np.mean(per_class)),
        confusion=cm.tolist(),
        num_samples=int(cm.sum()),
    )


def roc_points(scores, positives) -> list[tuple[float, float, float]]:
    """ROC for a binary score: ``(fpr, tpr, threshold)`` from (0, 0) to (1, 1).

    A sample is called positive when its score is ``>= threshold``; thresholds
    sweep the unique scores from high to low, preceded by ``+inf``.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(positives).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateRoc("ROC needs both positive and negative samples")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    points = [(0.0, 0.0, math.inf)]
    tp = fp = 0
    i = 0
    while i < s.size:
        j = i
        while j < s.size and s[j] == s[i]:
            tp += int(y[j])
            fp += int(not y[j])
            j += 1
        points.append((fp / n_neg, tp / n_pos, float(s[i])))
        i = j
    return points


def auc_trapezoid(points) -> float:
    pts = sorted(points, key=lambda p: (p[0], p[1]))
    area = 0.0
    for (x0, y0, _), (x1, y1, _) in zip(pts, pts[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def evaluate_probabilities(probs, labels, child_roc: bool = True) -> Metrics:
    probs = np.asarray(probs, dtype=float)
    metrics = compute_metrics(np.argmax(probs, axis=1), labels)
    if child_roc:
        try:
            pts = roc_points(probs[:, int(Label.CHILD)], np.asarray(labels) == int(Label.CHILD))
        except DegenerateRoc:
            pts = []
        metrics.roc_points = pts
        metrics.auc = auc_trapezoid(pts) if pts else None
    return metrics


# ---------------------------------------------------------------------------
# report files


def write_metrics(metrics: Metrics, directory: Path, prefix: str = "") -> None:
    directory.mkdir(parents=True, exist_ok=True)
    d = metrics.to_dict()
    d["roc_points"] = [[fpr, tpr, (None if math.isinf(thr) else thr)] for fpr, tpr, thr in metrics.roc_points]
    _atomic_text(directory / f"{prefix}metrics.json", json.dumps(d, indent=2))
    scalar = ["accuracy", "f1", "tpr", "fpr", "precision", "macro_f1", "auc", "num_samples"]
    rows = [["metric", "value"]] + [[k, d[k]] for k in scalar]
    _atomic_csv(directory / f"{prefix}metrics.csv", rows)
    names = [c.name.lower() for c in CLASS_ORDER]
    cm_rows = [["true\\pred", *names]] + [[names[i], *row] for i, row in enumerate(metrics.confusion)]
    _atomic_csv(directory / f"{prefix}confusion.csv", cm_rows)
    roc_rows = [["threshold", "fpr", "tpr"]] + [
        ["inf" if math.isinf(thr) else repr(thr), repr(fpr), repr(tpr)] for fpr, tpr, thr in metrics.roc_points]
    _atomic_csv(directory / f"{prefix}roc.csv", roc_rows)


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _atomic_csv(path: Path, rows) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    tmp.replace(path)
