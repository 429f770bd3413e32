"""Confusion matrices, accuracy, quadratic weighted kappa, one-vs-rest rates.

Rows are ground truth, columns are predictions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class KappaUndefinedError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion matrix counts must be nonnegative")

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def transpose(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts.T.copy())


def confusion_matrix(truths: Sequence[int], preds: Sequence[int], num_classes: int) -> ConfusionMatrix:
    t = np.asarray(truths, dtype=np.int64)
    p = np.asarray(preds, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1:
        raise ValueError(f"truths and preds must be 1-D of equal length, got {t.shape} and {p.shape}")
    if t.size == 0:
        raise ValueError("cannot build a confusion matrix from empty input")
    for name, arr in (("truth", t), ("prediction", p)):
        bad = arr[(arr < 0) | (arr >= num_classes)]
        if bad.size:
            raise ValueError(f"{name} label {int(bad[0])} out of range for {num_classes} classes")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def _as_counts(cm) -> np.ndarray:
    return cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)


def accuracy(cm) -> float:
    counts = _as_counts(cm)
    total = counts.sum()
    if total < 1:
        raise ValueError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(counts) / total)


def quadratic_weights(num_classes: int) -> np.ndarray:
    idx = np.arange(num_classes)
    return (idx[:, None] - idx[None, :]) ** 2 / (num_classes - 1) ** 2


def quadratic_weighted_kappa(cm) -> float:
    """1 - sum(w*O) / sum(w*E), w = (i-j)^2/(C-1)^2, E = outer(row, col) / total.

    Integer counts are reduced in exact integer arithmetic (the (C-1)^2
    factor cancels), so the result is bit-identical for M and M.T.
    """
    raw = _as_counts(cm)
    O = np.asarray(raw)
    C = O.shape[0]
    if O.sum() <= 0:
        raise ValueError("kappa of an empty confusion matrix is undefined")
    if C < 2:
        raise ValueError("kappa needs at least two classes")
    if np.issubdtype(O.dtype, np.integer):
        counts = O.tolist()
        total = sum(map(sum, counts))
        rows = [sum(r) for r in counts]
        cols = [sum(c) for c in zip(*counts)]
        num = sum((i - j) ** 2 * counts[i][j] for i in range(C) for j in range(C)) * total
        den = sum((i - j) ** 2 * rows[i] * cols[j] for i in range(C) for j in range(C))
    else:
        O = O.astype(np.float64)
        W = quadratic_weights(C)
        num = (W * (O + O.T)).sum() / 2 * O.sum()
        den = (W * np.outer(O.sum(axis=1), O.sum(axis=0))).sum()
    if den == 0:
        if num == 0:
            return 1.0
        raise KappaUndefinedError("kappa undefined: expected disagreement is zero")
    return float(1.0 - num / den)


def normalize_rows(cm) -> np.ndarray:
    counts = _as_counts(cm).astype(np.float64)
    sums = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, sums, out=np.zeros_like(counts), where=sums > 0)


@dataclass
class OneVsRest:
    positive_class: int
    tp: int
    fp: int
    fn: int
    tn: int
    fpr: float | None
    fnr: float | None


def one_vs_rest(cm, positive_class: int) -> OneVsRest:
    """Binarize around ``positive_class``; a rate with an empty population is None."""
    counts = _as_counts(cm)
    C = counts.shape[0]
    if not 0 <= positive_class < C:
        raise ValueError(f"positive_class {positive_class} out of range for {C} classes")
    k = positive_class
    tp = int(counts[k, k])
    fn = int(counts[k, :].sum()) - tp
    fp = int(counts[:, k].sum()) - tp
    tn = int(counts.sum()) - tp - fn - fp
    fpr = fp / (fp + tn) if fp + tn > 0 else None
    fnr = fn / (tp + fn) if tp + fn > 0 else None
    return OneVsRest(k, tp, fp, fn, tn, fpr, fnr)


def recall(cm, cls: int) -> float | None:
    r = one_vs_rest(cm, cls)
    return None if r.fnr is None else 1.0 - r.fnr


@dataclass
class MetricsReport:
    accuracy: float
    kappa: float | None
    confusion: list[list[int]]
    confusion_row_normalized: list[list[float]]
    per_class: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "kappa": self.kappa,
            "confusion": self.confusion,
            "confusion_row_normalized": self.confusion_row_normalized,
            "per_class": self.per_class,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["accuracy"], d["kappa"], d["confusion"], d["confusion_row_normalized"], d["per_class"])

    @property
    def matrix(self) -> ConfusionMatrix:
        return ConfusionMatrix(np.array(self.confusion))


def metrics_report(cm: ConfusionMatrix) -> MetricsReport:
    try:
        kappa = quadratic_weighted_kappa(cm)
    except KappaUndefinedError:
        kappa = None
    per_class = []
    for k in range(cm.num_classes):
        r = one_vs_rest(cm, k)
        per_class.append({"class": k, "tp": r.tp, "fp": r.fp, "fn": r.fn, "tn": r.tn, "fpr": r.fpr, "fnr": r.fnr})
    return MetricsReport(
        accuracy=accuracy(cm),
        kappa=kappa,
        confusion=cm.counts.tolist(),
        confusion_row_normalized=normalize_rows(cm).tolist(),
        per_class=per_class,
    )


def render_confusion(cm) -> str:
    """Counts with the row-normalized fraction in brackets."""
    counts = _as_counts(cm)
    norm = normalize_rows(counts)
    C = counts.shape[0]
    cells = [[f"{counts[i, j]} ({norm[i, j]:.2f})" for j in range(C)] for i in range(C)]
    width = max(len(c) for row in cells for c in row)
    header = "true\\pred " + " ".join(f"{j:>{width}}" for j in range(C))
    lines = [header]
    for i, row in enumerate(cells):
        lines.append(f"{i:>9} " + " ".join(f"{c:>{width}}" for c in row))
    return "\n".join(lines)
