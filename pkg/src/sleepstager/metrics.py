"""Epoch-level classification metrics: accuracy, per-class F1, Cohen's kappa.

All metrics are pure functions of a confusion matrix with rows indexed
by the reference stage and columns by the predicted stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STAGE_NAMES = ("W", "N1", "N2", "N3", "REM")


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    counts: np.ndarray  # [C, C] int64, rows = reference, cols = predicted

    def __eq__(self, other):
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return np.array_equal(self.counts, other.counts)

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion matrix entries must be non-negative")
        object.__setattr__(self, "counts", counts)

    @classmethod
    def from_labels(cls, y_true, y_pred, n_classes=5):
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        if y_true.shape != y_pred.shape or y_true.ndim != 1:
            raise ValueError(
                f"label arrays must be equal-length 1-D, got "
                f"{y_true.shape} vs {y_pred.shape}")
        if y_true.size < 1:
            raise ValueError("cannot build a confusion matrix from zero pairs")
        for name, arr in (("true", y_true), ("predicted", y_pred)):
            if arr.min() < 0 or arr.max() >= n_classes:
                raise ValueError(
                    f"{name} labels out of range [0, {n_classes})")
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (y_true, y_pred), 1)
        return cls(counts=counts)

    @property
    def n_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts)


def accuracy(cm):
    """Correctly classified fraction: trace over total."""
    total = cm.total
    if total < 1:
        raise ValueError("accuracy of an empty confusion matrix")
    return float(np.trace(cm.counts)) / total


def per_class_f1(cm):
    """F1_i = 2*TP_i / (2*TP_i + FP_i + FN_i); zero-support classes get 0."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    denom = 2.0 * tp + fp + fn
    f1 = np.zeros(cm.n_classes, dtype=np.float64)
    nonzero = denom > 0
    f1[nonzero] = 2.0 * tp[nonzero] / denom[nonzero]
    return f1


def macro_f1(cm):
    """Unweighted mean of the per-class F1 scores."""
    return float(per_class_f1(cm).mean())


def cohen_kappa(cm):
    """Chance-corrected agreement (p_o - p_e) / (1 - p_e).

    The degenerate case p_e = 1 (all mass in one cell) is defined as 1.0
    under perfect agreement and 0.0 otherwise, which is continuous with
    the perfect-agreement limit.
    """
    total = cm.total
    if total < 1:
        raise ValueError("kappa of an empty confusion matrix")
    counts = cm.counts.astype(np.float64)
    p_o = np.trace(counts) / total
    rows = counts.sum(axis=1) / total
    cols = counts.sum(axis=0) / total
    p_e = float((rows * cols).sum())
    if p_e >= 1.0:
        return 1.0 if p_o >= 1.0 else 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def kappa_improvement(kappa_base, kappa_sub):
    """Difference in kappa expressed in points (x100), one decimal.

    Matches the reporting convention where a move from 0.589 to 0.680
    reads as a +9.1 improvement.
    """
    for value in (kappa_base, kappa_sub):
        if not -1.0 <= value <= 1.0:
            raise ValueError(f"kappa {value} outside [-1, 1]")
    return round((kappa_sub - kappa_base) * 100.0, 1)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    per_class_f1: tuple[float, ...]
    macro_f1: float
    kappa: float
    confusion: ConfusionMatrix
    n_epochs: int

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "per_class_f1": list(self.per_class_f1),
            "macro_f1": self.macro_f1,
            "kappa": self.kappa,
            "confusion": self.confusion.counts.tolist(),
            "n_epochs": self.n_epochs,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(accuracy=d["accuracy"],
                   per_class_f1=tuple(d["per_class_f1"]),
                   macro_f1=d["macro_f1"], kappa=d["kappa"],
                   confusion=ConfusionMatrix(np.asarray(d["confusion"])),
                   n_epochs=d["n_epochs"])


def compute_report(y_true, y_pred, n_classes=5):
    cm = ConfusionMatrix.from_labels(y_true, y_pred, n_classes)
    return report_from_confusion(cm)


def report_from_confusion(cm):
    return MetricsReport(
        accuracy=accuracy(cm),
        per_class_f1=tuple(float(v) for v in per_class_f1(cm)),
        macro_f1=macro_f1(cm),
        kappa=cohen_kappa(cm),
        confusion=cm,
        n_epochs=cm.total)
