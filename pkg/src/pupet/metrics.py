from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    auroc: float
    n_samples: int
    class_counts: tuple


def accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if labels.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return int((predictions == labels).sum()) / labels.size


def midranks(values) -> np.ndarray:
    """1-based ranks with ties sharing the mean of the ranks they span."""
    values = np.asarray(values, dtype=np.float64)
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    return ((upper - counts + 1 + upper) / 2.0)[inverse]


def auroc(scores, labels) -> float:
    """P(score of a random positive > score of a random negative), ties worth 1/2."""
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"length mismatch: {scores.shape} vs {labels.shape}")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC is undefined unless both classes are present")
    u = midranks(scores)[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_multiclass(probs: np.ndarray, labels) -> float:
    """Binary: AUROC of the class-1 probability.  Otherwise unweighted one-vs-rest mean
    over the classes present with both positives and negatives."""
    probs, labels = np.asarray(probs), np.asarray(labels)
    k = probs.shape[1]
    if k == 2:
        return auroc(probs[:, 1], labels)
    parts = [auroc(probs[:, c], (labels == c).astype(int))
             for c in range(k) if 0 < (labels == c).sum() < len(labels)]
    if not parts:
        raise ValueError("AUROC is undefined unless at least two classes are present")
    return float(np.mean(parts))


def best_guess(labels) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("best_guess of an empty label set is undefined")
    return int(np.bincount(labels).max()) / labels.size


def evaluate_probs(probs: np.ndarray, labels) -> EvalResult:
    labels = np.asarray(labels, dtype=np.int64)
    k = probs.shape[1]
    return EvalResult(accuracy(np.argmax(probs, axis=1), labels), auroc_multiclass(probs, labels),
                      len(labels), tuple(np.bincount(labels, minlength=k).tolist()))
