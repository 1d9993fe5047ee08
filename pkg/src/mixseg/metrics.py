"""Confusion matrices and class-wise precision / recall / F1.

Two F1 aggregates are reported. ``f1_macro`` is the plain mean of the
class-wise F1 values. ``f1_micro`` by default weights each class-wise F1
by its ground-truth share (``micro="support"``); the conventional pooled
variant, which reduces to accuracy for single-label problems, is available
with ``micro="pooled"``.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DataError, DimensionError, LabelError


@dataclass(frozen=True)
class ClassScore:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class Aggregate:
    f1_macro: float
    f1_micro: float
    accuracy: float


def confusion_matrix(pred, gt, num_classes, ignore_label=None):
    """Counts with rows = ground truth, columns = prediction."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise DimensionError(f"pred has {pred.size} labels, gt has {gt.size}")
    if ignore_label is not None:
        keep = gt != ignore_label
        pred, gt = pred[keep], gt[keep]
    for name, arr in (("gt", gt), ("pred", pred)):
        bad = np.flatnonzero((arr < 0) | (arr >= num_classes))
        if bad.size:
            raise LabelError(f"{name} label {arr[bad[0]]} at position {bad[0]} outside [0, {num_classes})")
    idx = gt.astype(np.int64) * num_classes + pred.astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def merge(*matrices):
    """Cell-wise sum of confusion matrices."""
    return np.sum(np.stack(matrices), axis=0)


def class_prf1(cm):
    """Per-class scores; every 0/0 ratio is taken as 0."""
    cm = np.asarray(cm)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    scores = []
    for c in range(cm.shape[0]):
        p = tp[c] / (tp[c] + fp[c]) if tp[c] + fp[c] > 0 else 0.0
        r = tp[c] / (tp[c] + fn[c]) if tp[c] + fn[c] > 0 else 0.0
        f1 = (p * r) / ((p + r) / 2.0) if p + r > 0 else 0.0
        scores.append(ClassScore(float(p), float(r), float(f1), int(tp[c] + fn[c])))
    return scores


def aggregate_scores(scores, cm, micro="support", exclude_undefined=False):
    """Return :class:`Aggregate` (macro F1, micro F1, accuracy).

    With ``exclude_undefined`` the macro mean skips classes that never occur
    in either ground truth or prediction.
    """
    cm = np.asarray(cm)
    if cm.shape[0] < 2:
        raise ConfigError("need at least two classes")
    total = int(cm.sum())
    support = np.array([s.support for s in scores], dtype=np.float64)
    if total == 0 or support.sum() == 0:
        raise DataError("no ground-truth support to aggregate over")
    f1 = np.array([s.f1 for s in scores])
    if exclude_undefined:
        present = (cm.sum(axis=0) + cm.sum(axis=1)) > 0
        macro = float(f1[present].mean())
    else:
        macro = float(f1.mean())
    accuracy = float(np.trace(cm) / total)
    if micro == "support":
        micro_f1 = float((support / support.sum() * f1).sum())
    elif micro == "pooled":
        tp = np.trace(cm)
        micro_f1 = float(tp / total)
    else:
        raise ConfigError(f"unknown micro variant {micro!r}")
    return Aggregate(macro, micro_f1, accuracy)


def evaluate_labels(pred, gt, num_classes, ignore_label=None, micro="support"):
    """Convenience: confusion matrix, class scores and aggregate in one call."""
    cm = confusion_matrix(pred, gt, num_classes, ignore_label)
    scores = class_prf1(cm)
    return cm, scores, aggregate_scores(scores, cm, micro=micro)


def report_rows(scores):
    """Class-wise CSV rows ``(class, precision, recall, f1, support)``."""
    return [{"class": c, **asdict(s)} for c, s in enumerate(scores)]


def summary_json(cm, scores, agg):
    return json.dumps({
        "confusion_matrix": np.asarray(cm).tolist(),
        "classes": report_rows(scores),
        **asdict(agg),
    }, indent=2)
