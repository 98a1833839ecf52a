"""Slide-level metrics: AUC, accuracy, macro-F1, and fold aggregation."""
from __future__ import annotations

import csv
import math
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class UndefinedMetricError(ValueError):
    pass


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    n = len(values)
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        # 1-based ranks i+1 .. j+1 share their mean
        ranks[order[i:j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    return ranks


def auc_binary(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via the Mann-Whitney rank sum."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    if n_pos + n_neg != labels.size:
        raise ValueError("binary labels must be 0 or 1")
    ranks = _average_ranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_multiclass(probs, labels, average: str = "macro") -> float:
    """One-vs-rest AUC, averaged uniformly ("macro") or by class prevalence ("weighted")."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if average not in ("macro", "weighted"):
        raise ValueError("average must be 'macro' or 'weighted'")
    n_classes = probs.shape[1]
    missing = [k for k in range(n_classes) if not np.any(labels == k)]
    if missing:
        raise UndefinedMetricError(f"classes absent from labels: {missing}")
    per_class = [auc_binary(probs[:, k], (labels == k).astype(int)) for k in range(n_classes)]
    if average == "weighted":
        counts = np.bincount(labels, minlength=n_classes)
        return float(np.dot(per_class, counts) / counts.sum())
    return float(np.mean(per_class))


def confusion_matrix(preds, labels, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(np.asarray(labels, dtype=int), np.asarray(preds, dtype=int)):
        cm[t, p] += 1
    return cm


def per_class_prf(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    tp = np.diag(cm).astype(np.float64)
    pred_tot = cm.sum(axis=0).astype(np.float64)
    true_tot = cm.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, pred_tot, out=np.zeros_like(tp), where=pred_tot > 0)
    recall = np.divide(tp, true_tot, out=np.zeros_like(tp), where=true_tot > 0)
    # 2pr/(p+r) == 2tp/(row+col), which avoids compounding rounding
    denom = pred_tot + true_tot
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1


def macro_f1(cm: np.ndarray) -> float:
    """Unweighted mean of per-class F1, summed in exact rationals."""
    total = Fraction(0)
    for k in range(cm.shape[0]):
        denom = int(cm[:, k].sum() + cm[k].sum())
        if denom:
            total += Fraction(2 * int(cm[k, k]), denom)
    return float(total / cm.shape[0])


def accuracy_and_f1(preds, labels, n_classes: int) -> tuple[float, float, np.ndarray]:
    preds = np.asarray(preds, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if preds.shape != labels.shape or preds.size == 0:
        raise ValueError("preds and labels must be non-empty and equally long")
    cm = confusion_matrix(preds, labels, n_classes)
    acc = float(Fraction(int(np.trace(cm)), int(cm.sum())))
    return acc, macro_f1(cm), cm


@dataclass
class MetricsReport:
    """Metrics in percent, plus the raw confusion matrix."""

    auc: float
    acc: float
    f1_macro: float
    n_samples: int
    precision: list[float] = field(default_factory=list)
    recall: list[float] = field(default_factory=list)
    f1: list[float] = field(default_factory=list)
    confusion: list[list[int]] = field(default_factory=list)

    def as_row(self) -> dict:
        return {"auc": f"{self.auc:.4f}", "acc": f"{self.acc:.4f}",
                "f1": f"{self.f1_macro:.4f}", "n": self.n_samples}


def evaluate_probs(probs, labels) -> MetricsReport:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    n_classes = probs.shape[1]
    if n_classes == 2:
        auc = auc_binary(probs[:, 1], labels)
    else:
        auc = auc_multiclass(probs, labels)
    preds = probs.argmax(axis=1)
    acc, f1m, cm = accuracy_and_f1(preds, labels, n_classes)
    precision, recall, f1 = per_class_prf(cm)
    return MetricsReport(
        auc=100.0 * auc, acc=100.0 * acc, f1_macro=100.0 * f1m, n_samples=int(labels.size),
        precision=[100.0 * x for x in precision], recall=[100.0 * x for x in recall],
        f1=[100.0 * x for x in f1], confusion=cm.tolist(),
    )


def aggregate(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    values = [float(v) for v in values]
    if not values:
        raise ValueError("aggregate needs at least one value")
    mean = math.fsum(values) / len(values)
    if len(values) == 1:
        return mean, 0.0
    var = math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1)
    return mean, math.sqrt(var)


def format_mean_std(values) -> str:
    mean, std = aggregate(values)
    return f"{mean:.2f} ± {std:.2f}"


METRIC_COLUMNS = (("AUC", "auc"), ("ACC", "acc"), ("F1", "f1_macro"))


def aggregate_table(reports: list[MetricsReport], label: str = "") -> str:
    """Aligned text table with the AUC / ACC / F1 column order."""
    cells = [format_mean_std([getattr(r, attr) for r in reports]) for _, attr in METRIC_COLUMNS]
    head = ["", *(name for name, _ in METRIC_COLUMNS)] if label else [n for n, _ in METRIC_COLUMNS]
    row = [label, *cells] if label else cells
    widths = [max(len(h), len(c)) for h, c in zip(head, row)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    return fmt.format(*head).rstrip() + "\n" + fmt.format(*row).rstrip() + "\n"


def write_reports_csv(reports: list[MetricsReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fold", "auc", "acc", "f1", "n"])
        for i, r in enumerate(reports):
            row = r.as_row()
            writer.writerow([i, row["auc"], row["acc"], row["f1"], row["n"]])
        means = [aggregate([getattr(r, attr) for r in reports]) for _, attr in METRIC_COLUMNS]
        writer.writerow(["mean", *(f"{m:.4f}" for m, _ in means), ""])
        writer.writerow(["std", *(f"{s:.4f}" for _, s in means), ""])
