"""Diagnostic artifacts: confusion matrices, per-class reports, error
scatter, high-confidence heatmaps.

The figure-producing operations write an SVG (via ``figures``) plus a CSV
holding the same numbers, so every visual can be re-derived and checked
from its delimited twin.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import figures

__all__ = [
    "ClassReport", "ErrorScatterResult", "confusion_matrix", "class_report",
    "error_scatter", "eeg_heatmap", "high_confidence_select", "softmax_probs",
]


def confusion_matrix(true_ids, pred_ids, k: int) -> np.ndarray:
    """k x k counts; rows are true classes, columns predicted classes."""
    true_ids = np.asarray(true_ids, dtype=np.int64)
    pred_ids = np.asarray(pred_ids, dtype=np.int64)
    if true_ids.shape != pred_ids.shape:
        raise ValueError("true and predicted ids must align")
    if k < 1:
        raise ValueError("k must be >= 1")
    for name, ids in (("true", true_ids), ("pred", pred_ids)):
        if ids.size and (ids.min() < 0 or ids.max() >= k):
            raise ValueError(f"{name} ids must lie in [0, {k})")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (true_ids, pred_ids), 1)
    return cm


@dataclass
class ClassReport:
    """Per-class precision/recall/F1/support derived from a confusion matrix.

    Zero-division cases report 0.0 and set the matching ``undefined_*``
    flag (no predictions for a class, or no true samples of it).
    """

    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    undefined_precision: np.ndarray
    undefined_recall: np.ndarray


def class_report(cm: np.ndarray) -> ClassReport:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] < 2:
        raise ValueError("confusion matrix must be square with k >= 2")
    diag = np.diag(cm).astype(np.float64)
    col = cm.sum(axis=0).astype(np.float64)
    row = cm.sum(axis=1).astype(np.float64)
    undef_p = col == 0
    undef_r = row == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(undef_p, 0.0, diag / np.where(undef_p, 1, col))
        recall = np.where(undef_r, 0.0, diag / np.where(undef_r, 1, row))
    denom = precision + recall
    f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1), 0.0)
    return ClassReport(
        precision=precision, recall=recall, f1=f1,
        support=row.astype(np.int64),
        undefined_precision=undef_p, undefined_recall=undef_r,
    )


def write_class_report_csv(report: ClassReport, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "precision", "recall", "f1", "support"])
        for i in range(len(report.support)):
            writer.writerow([i, f"{report.precision[i]:.6f}",
                             f"{report.recall[i]:.6f}", f"{report.f1[i]:.6f}",
                             int(report.support[i])])


def write_confusion_csv(cm: np.ndarray, path: str) -> None:
    k = cm.shape[0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\pred"] + [str(j) for j in range(k)])
        for i in range(k):
            writer.writerow([i] + [int(v) for v in cm[i]])


@dataclass
class ErrorScatterResult:
    distances_mm: np.ndarray
    within: np.ndarray          # True = blue (<= threshold), False = red
    n_within: int
    n_above: int


def error_scatter(preds_px, labels_px, svg_path: str, csv_path: str,
                  threshold_mm: float = 55.4,
                  px_per_mm: float = 2.0) -> ErrorScatterResult:
    """Threshold-colored scatter of test error over true positions.

    A sample exactly at the threshold counts as within (blue). The CSV
    lists x, y, distance_mm and the blue/red flag per sample.
    """
    preds_px = np.asarray(preds_px, dtype=np.float64)
    labels_px = np.asarray(labels_px, dtype=np.float64)
    if preds_px.shape != labels_px.shape or preds_px.ndim != 2:
        raise ValueError("predictions and labels must both be [n, 2]")
    distances_mm = np.sqrt(((preds_px - labels_px) ** 2).sum(axis=1)) / px_per_mm
    within = distances_mm <= threshold_mm

    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x_px", "y_px", "distance_mm", "flag"])
        for (x, y), d, w in zip(labels_px, distances_mm, within):
            writer.writerow([f"{x:.6f}", f"{y:.6f}", f"{d:.6f}",
                             "blue" if w else "red"])
    figures.render_error_scatter(labels_px, preds_px, within, threshold_mm,
                                 svg_path)
    return ErrorScatterResult(
        distances_mm=distances_mm, within=within,
        n_within=int(within.sum()), n_above=int((~within).sum()),
    )


def normalize_window(sample: np.ndarray) -> np.ndarray:
    """Per-sample min-max to [0, 1]; a constant window maps to 0.5."""
    sample = np.asarray(sample, dtype=np.float64)
    if not np.isfinite(sample).all():
        raise ValueError("sample contains non-finite values")
    lo, hi = sample.min(), sample.max()
    if hi == lo:
        return np.full_like(sample, 0.5)
    return (sample - lo) / (hi - lo)


def eeg_heatmap(sample, svg_path: str, csv_path: str) -> np.ndarray:
    """Render one C x T window as a shaded raster; returns the normalized
    matrix that was drawn (also written to the CSV, one row per channel)."""
    norm = normalize_window(sample)
    if norm.ndim != 2:
        raise ValueError("sample must be a C x T matrix")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"t{j}" for j in range(norm.shape[1])])
        for row in norm:
            writer.writerow([f"{v:.6f}" for v in row])
    figures.render_heatmap(norm, svg_path)
    return norm


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def high_confidence_select(logits, threshold: float = 0.9):
    """Rows whose softmax peak reaches the threshold (inclusive).

    Returns (row indices, predicted class ids).
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ValueError("logits must be [n, k] with k >= 2")
    probs = softmax_probs(logits)
    peak = probs.max(axis=1)
    indices = np.flatnonzero(peak >= threshold)
    return indices, probs[indices].argmax(axis=1)
