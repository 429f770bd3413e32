"""Softmax cross-entropy and its class-balanced (effective-number) variant."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_BETA = 0.9999


@dataclass(frozen=True)
class ClassWeights:
    beta: float
    class_counts: tuple[int, ...]
    weights: tuple[float, ...]
    normalized: bool = False

    @property
    def num_classes(self) -> int:
        return len(self.weights)

    def as_array(self) -> np.ndarray:
        return np.array(self.weights, dtype=np.float64)


def effective_number_weights(class_counts: Sequence[int], beta: float = DEFAULT_BETA) -> ClassWeights:
    """Per-class weight (1 - beta) / (1 - beta**n_y); beta == 1 gives 1 / n_y."""
    counts = tuple(int(c) for c in class_counts)
    if not counts:
        raise ValueError("class_counts is empty")
    for k, c in enumerate(counts):
        if c < 1:
            raise ValueError(f"class {k} has count {c}; every class needs at least one sample")
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if beta == 1.0:
        raw = [1.0 / c for c in counts]
    elif beta == 0.0:
        raw = [1.0] * len(counts)
    else:
        log_beta = math.log(beta)
        # 1 - beta**n without cancellation when beta is close to 1.
        raw = [(1.0 - beta) / -math.expm1(c * log_beta) for c in counts]
    return ClassWeights(beta=float(beta), class_counts=counts, weights=tuple(raw))


def normalize_weights(w: ClassWeights) -> ClassWeights:
    """Rescale so the weights sum to the number of classes."""
    arr = w.as_array()
    scaled = arr * (len(arr) / arr.sum())
    return ClassWeights(w.beta, w.class_counts, tuple(float(v) for v in scaled), normalized=True)


def class_balanced_weights(class_counts: Sequence[int], beta: float = DEFAULT_BETA, normalize: bool = True) -> ClassWeights:
    w = effective_number_weights(class_counts, beta)
    return normalize_weights(w) if normalize else w


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def per_sample_ce(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Plain numpy CE per row, no graph."""
    lp = log_softmax(np.atleast_2d(logits))
    return -lp[np.arange(len(lp)), np.atleast_1d(targets)]


def _check_targets(logits: Tensor, y) -> tuple[np.ndarray, bool]:
    single = logits.data.ndim == 1
    if logits.data.ndim not in (1, 2):
        raise ad.ShapeError(f"logits must be [C] or [n,C], got {logits.shape}")
    targets = np.atleast_1d(np.asarray(y, dtype=np.int64))
    n = 1 if single else logits.shape[0]
    if targets.shape != (n,):
        raise ad.ShapeError(f"expected {n} target(s), got shape {targets.shape}")
    C = logits.shape[-1]
    bad = targets[(targets < 0) | (targets >= C)]
    if bad.size:
        raise ValueError(f"target {int(bad[0])} out of range for {C} classes")
    return targets, single


def _weighted_ce(logits: Tensor, targets: np.ndarray, sample_w: np.ndarray, single: bool) -> Tensor:
    Z = np.atleast_2d(logits.data)
    lp = log_softmax(Z)
    rows = np.arange(len(Z))
    ce = -lp[rows, targets]
    if single:
        value = sample_w[0] * ce[0]
        coef = sample_w
    else:
        total = sample_w.sum()
        value = float((sample_w * ce).sum() / total)
        coef = sample_w / total

    def fn(g):
        d = np.exp(lp)
        d[rows, targets] -= 1.0
        d *= coef[:, None] * g
        return (d[0] if single else d,)

    return ad.custom(np.asarray(value), (logits,), fn, "cross_entropy")


def ce_loss(logits: Tensor, y) -> Tensor:
    """Softmax cross-entropy; a batch [n,C] is averaged over samples."""
    targets, single = _check_targets(logits, y)
    return _weighted_ce(logits, targets, np.ones(len(targets)), single)


def cbce_loss(logits: Tensor, y, weights: ClassWeights | Sequence[float]) -> Tensor:
    """weight[y] * CE for one sample; weighted mean of per-sample CE for a batch."""
    w = weights.as_array() if isinstance(weights, ClassWeights) else np.asarray(weights, dtype=np.float64)
    if w.shape != (logits.shape[-1],):
        raise ad.ShapeError(f"{w.shape[0]} class weights for {logits.shape[-1]} classes")
    targets, single = _check_targets(logits, y)
    return _weighted_ce(logits, targets, w[targets], single)
