"""Segmentation and classification metrics with strict, test-friendly conventions.

All segmentation metrics operate on binary masks (2-D integer/bool arrays).
Multi-class masks are reduced first: the union of all pathology labels forms
the headline "infection region", and a per-label one-vs-rest breakdown is
macro-averaged alongside it.

Conventions:
  * dice(empty, empty) = 1.0
  * hausdorff on an empty mask raises EmptyMaskError; report aggregation
    excludes those pairs and records how many were excluded.
  * AUC is the Mann-Whitney rank statistic with tie correction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


class EmptyMaskError(ValueError):
    """Raised when a metric is undefined for an empty mask."""


def _as_binary(mask: np.ndarray) -> np.ndarray:
    return np.asarray(mask).astype(bool)


def _check_dims(pred: np.ndarray, ref: np.ndarray) -> None:
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs ref {ref.shape}")


def dice(pred: np.ndarray, ref: np.ndarray) -> float:
    """Dice overlap 2|P∩R| / (|P|+|R|); 1.0 when both masks are empty."""
    pred = _as_binary(pred)
    ref = _as_binary(ref)
    _check_dims(pred, ref)
    denom = int(pred.sum()) + int(ref.sum())
    if denom == 0:
        return 1.0
    inter = int(np.logical_and(pred, ref).sum())
    return 2.0 * inter / denom


def hausdorff(
    pred: np.ndarray,
    ref: np.ndarray,
    spacing: float = 1.0,
    percentile: float | None = None,
) -> float:
    """Symmetric Hausdorff distance between foreground point sets.

    Euclidean pixel metric, scaled by ``spacing`` (mm per pixel) when given.
    ``percentile`` replaces the max of each directed distance distribution
    (e.g. 95.0 for the robust variant); default is the classic maximum.
    """
    pred = _as_binary(pred)
    ref = _as_binary(ref)
    _check_dims(pred, ref)
    pts_p = np.argwhere(pred).astype(np.float64)
    pts_r = np.argwhere(ref).astype(np.float64)
    if len(pts_p) == 0 or len(pts_r) == 0:
        raise EmptyMaskError("hausdorff undefined for an empty mask")

    d_pr = cKDTree(pts_r).query(pts_p)[0]
    d_rp = cKDTree(pts_p).query(pts_r)[0]
    if percentile is None:
        directed = (d_pr.max(), d_rp.max())
    else:
        directed = (
            float(np.percentile(d_pr, percentile)),
            float(np.percentile(d_rp, percentile)),
        )
    return float(max(directed)) * spacing


def mae(pred: np.ndarray, ref: np.ndarray) -> float:
    """Mean absolute error between two binary masks (pixel fraction that differs)."""
    pred = _as_binary(pred)
    ref = _as_binary(ref)
    _check_dims(pred, ref)
    return float(np.abs(pred.astype(np.float64) - ref.astype(np.float64)).mean())


@dataclass
class ClassificationMetrics:
    accuracy: float
    f1: float
    auc: float | None
    sensitivity: float
    specificity: float

    def as_tuple(self) -> tuple:
        return (self.accuracy, self.f1, self.auc, self.sensitivity, self.specificity)


def classification_metrics(
    scores: np.ndarray, labels: np.ndarray, threshold: float = 0.5
) -> ClassificationMetrics:
    """Binary classification metrics at a fixed threshold plus rank AUC.

    ``auc`` is None when only one class is present (undefined); the threshold
    metrics are still computed. Ties in scores receive average ranks, so AUC
    equals the probability that a random positive outranks a random negative
    with ties counted half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape:
        raise ValueError(f"length mismatch: {scores.shape} vs {labels.shape}")
    if scores.ndim != 1 or len(scores) == 0:
        raise ValueError("scores must be a non-empty 1-D array")

    preds = (scores >= threshold).astype(np.int64)
    tp = int(np.sum((preds == 1) & (labels == 1)))
    tn = int(np.sum((preds == 0) & (labels == 0)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    n_pos = tp + fn
    n_neg = tn + fp

    acc = (tp + tn) / len(labels)
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0
    sens = tp / n_pos if n_pos > 0 else 0.0
    spec = tn / n_neg if n_neg > 0 else 0.0

    if n_pos == 0 or n_neg == 0:
        auc = None
    else:
        auc = _rank_auc(scores, labels)
    return ClassificationMetrics(acc, f1, auc, sens, spec)


def _rank_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    # Mann-Whitney U from mid-ranks; identical scores share their average rank.
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    rank_sum = float(ranks[labels == 1].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def infection_mask(mask: np.ndarray, n_labels: int) -> np.ndarray:
    """Union of all non-background labels (the headline evaluation region)."""
    mask = np.asarray(mask)
    if mask.max(initial=0) >= n_labels:
        raise ValueError(f"mask contains label >= {n_labels}")
    return mask > 0


@dataclass
class MetricsReport:
    """Mean/std summary over images (or seeds) for every reported metric.

    Segmentation metrics refer to the union infection region; ``per_label``
    holds the one-vs-rest Dice per pathology label. ``hd_excluded`` counts
    image pairs skipped because one side had an empty mask.
    """

    dice_mean: float = float("nan")
    dice_std: float = float("nan")
    hd_mean: float = float("nan")
    hd_std: float = float("nan")
    mae_mean: float = float("nan")
    mae_std: float = float("nan")
    hd_excluded: int = 0
    per_label: dict[str, float] = field(default_factory=dict)
    accuracy_mean: float = float("nan")
    accuracy_std: float = float("nan")
    f1_mean: float = float("nan")
    f1_std: float = float("nan")
    auc_mean: float = float("nan")
    auc_std: float = float("nan")
    sensitivity_mean: float = float("nan")
    sensitivity_std: float = float("nan")
    specificity_mean: float = float("nan")
    specificity_std: float = float("nan")

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    def csv_header(self) -> str:
        keys = [k for k in self.__dict__ if k != "per_label"]
        return ",".join(keys)

    def to_csv_row(self) -> str:
        vals = [v for k, v in self.__dict__.items() if k != "per_label"]
        return ",".join(f"{v}" for v in vals)


def _mean_std(values: list[float]) -> tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def segmentation_report(
    preds: list[np.ndarray],
    refs: list[np.ndarray],
    n_labels: int,
    label_names: list[str] | None = None,
    spacing: float = 1.0,
    hd_percentile: float | None = None,
) -> MetricsReport:
    """Per-image headline metrics plus per-label Dice, aggregated to mean/std."""
    if len(preds) != len(refs):
        raise ValueError("preds and refs must have equal length")
    dms, hds, maes = [], [], []
    per_label_dice: dict[int, list[float]] = {k: [] for k in range(1, n_labels)}
    excluded = 0
    for p, r in zip(preds, refs):
        pb = infection_mask(p, n_labels)
        rb = infection_mask(r, n_labels)
        dms.append(dice(pb, rb))
        maes.append(mae(pb, rb))
        try:
            hds.append(hausdorff(pb, rb, spacing=spacing, percentile=hd_percentile))
        except EmptyMaskError:
            excluded += 1
        for k in range(1, n_labels):
            per_label_dice[k].append(dice(np.asarray(p) == k, np.asarray(r) == k))

    report = MetricsReport(hd_excluded=excluded)
    report.dice_mean, report.dice_std = _mean_std(dms)
    report.hd_mean, report.hd_std = _mean_std(hds)
    report.mae_mean, report.mae_std = _mean_std(maes)
    names = label_names or [f"label_{k}" for k in range(1, n_labels)]
    for k in range(1, n_labels):
        report.per_label[names[k - 1]] = _mean_std(per_label_dice[k])[0]
    return report


def classification_report(
    scores_per_seed: list[np.ndarray], labels_per_seed: list[np.ndarray]
) -> MetricsReport:
    """Aggregate classification metrics across seeds into mean/std."""
    cols: dict[str, list[float]] = {
        "accuracy": [], "f1": [], "auc": [], "sensitivity": [], "specificity": []
    }
    for scores, labels in zip(scores_per_seed, labels_per_seed):
        m = classification_metrics(np.asarray(scores), np.asarray(labels))
        cols["accuracy"].append(m.accuracy)
        cols["f1"].append(m.f1)
        if m.auc is not None:
            cols["auc"].append(m.auc)
        cols["sensitivity"].append(m.sensitivity)
        cols["specificity"].append(m.specificity)
    report = MetricsReport()
    report.accuracy_mean, report.accuracy_std = _mean_std(cols["accuracy"])
    report.f1_mean, report.f1_std = _mean_std(cols["f1"])
    report.auc_mean, report.auc_std = _mean_std(cols["auc"])
    report.sensitivity_mean, report.sensitivity_std = _mean_std(cols["sensitivity"])
    report.specificity_mean, report.specificity_std = _mean_std(cols["specificity"])
    return report
