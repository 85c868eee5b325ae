"""Segmentation overlap, ranking metrics, Youden thresholds and run-level reports."""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .radiomics import GGO, OTHER

CLASS_NAMES = ("background", "healthy", "ggo", "other")


class UndefinedMetricError(ValueError):
    pass


def dice_score(pred: np.ndarray, truth: np.ndarray, c: int) -> float:
    """``2|P & G| / (|P| + |G|)`` for class ``c``; 1.0 when the class is absent from both."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from truth {truth.shape}")
    p, g = pred == c, truth == c
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def merge_pathologies(labels: np.ndarray) -> np.ndarray:
    out = np.array(labels, copy=True)
    out[out == OTHER] = GGO
    return out


def merged_pathology_dice(pred: np.ndarray, truth: np.ndarray) -> float:
    return dice_score(merge_pathologies(pred), merge_pathologies(truth), GGO)


def dice_per_class(pred: np.ndarray, truth: np.ndarray, n_classes: int = 4) -> np.ndarray:
    return np.array([dice_score(pred, truth, c) for c in range(n_classes)])


def _binary(scores, labels) -> tuple:
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise UndefinedMetricError("metric needs both positive and negative labels")
    return s, y


def roc_auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative, ties counting one half."""
    s, y = _binary(scores, labels)
    ranks = rankdata(s)
    n_pos = y.sum()
    n_neg = y.size - n_pos
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Step-sum AP over descending distinct score thresholds."""
    s, y = _binary(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # keep the last index of every run of tied scores
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = tp[last]
    precision = tp / (last + 1.0)
    recall = tp / tp[-1]
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def youden_j(scores, labels, threshold: float) -> float:
    m = thresholded_metrics(scores, labels, threshold)
    return m.sensitivity + m.specificity - 1.0


def youden_threshold(scores, labels) -> float:
    """Midpoint between consecutive distinct scores maximising sensitivity + specificity - 1.

    Ties go to the lowest threshold.  If every score is equal the common
    value is returned with a warning.
    """
    s, y = _binary(scores, labels)
    values = np.unique(s)
    if values.size == 1:
        warnings.warn("all validation scores are equal; Youden's J is 0", RuntimeWarning)
        return float(values[0])
    candidates = (values[:-1] + values[1:]) / 2.0
    pos, neg = s[y], s[~y]
    sens = (pos[None, :] > candidates[:, None]).mean(axis=1)
    spec = (neg[None, :] <= candidates[:, None]).mean(axis=1)
    return float(candidates[int(np.argmax(sens + spec))])


@dataclass(frozen=True)
class ThresholdedMetrics:
    sensitivity: float
    specificity: float
    bacc: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int


def confusion(scores, labels, threshold: float) -> tuple:
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    pred = s > threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    tn = int(np.sum(~pred & ~y))
    return tp, fp, fn, tn


def metrics_from_confusion(tp: int, fp: int, fn: int, tn: int) -> ThresholdedMetrics:
    if tp + fn == 0:
        raise UndefinedMetricError("sensitivity is undefined without positive labels")
    if tn + fp == 0:
        raise UndefinedMetricError("specificity is undefined without negative labels")
    sens = tp / (tp + fn)
    spec = tn / (tn + fp)
    f1 = 2 * tp / (2 * tp + fp + fn)
    return ThresholdedMetrics(sens, spec, (sens + spec) / 2.0, f1, tp, fp, fn, tn)


def thresholded_metrics(scores, labels, threshold: float) -> ThresholdedMetrics:
    return metrics_from_confusion(*confusion(scores, labels, threshold))


@dataclass
class TaskMetrics:
    ap: float
    auc: float
    bacc: float
    f1: float
    sensitivity: float
    specificity: float
    threshold: float


def evaluate_task(test_scores, test_labels, threshold: float) -> TaskMetrics:
    m = thresholded_metrics(test_scores, test_labels, threshold)
    return TaskMetrics(
        average_precision(test_scores, test_labels),
        roc_auc(test_scores, test_labels),
        m.bacc,
        m.f1,
        m.sensitivity,
        m.specificity,
        float(threshold),
    )


@dataclass
class SegmentationMetrics:
    per_class: list
    mean: float
    merged_pathology: float

    @classmethod
    def compute(cls, pred: np.ndarray, truth: np.ndarray) -> "SegmentationMetrics":
        per = dice_per_class(pred, truth)
        return cls(per.tolist(), float(per.mean()), merged_pathology_dice(pred, truth))


@dataclass
class MetricsReport:
    tasks: dict = field(default_factory=dict)  # label -> TaskMetrics
    segmentation: Optional[SegmentationMetrics] = None

    def to_dict(self) -> dict:
        out = {"tasks": {k: asdict(v) for k, v in self.tasks.items()}}
        if self.segmentation is not None:
            out["segmentation"] = asdict(self.segmentation)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        seg = d.get("segmentation")
        return cls(
            {k: TaskMetrics(**v) for k, v in d.get("tasks", {}).items()},
            SegmentationMetrics(**seg) if seg else None,
        )


SUMMARY_KEYS = ("ap", "auc", "bacc", "f1")


def summarize(task: str, architecture: str, runs: Sequence[TaskMetrics]) -> dict:
    """Mean and standard deviation of the headline metrics across runs."""
    out = {"task": task, "architecture": architecture, "n_runs": len(runs)}
    for key in SUMMARY_KEYS:
        vals = np.array([getattr(r, key) for r in runs], dtype=float)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0}
    return out


def write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
