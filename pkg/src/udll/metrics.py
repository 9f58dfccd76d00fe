"""Clustering accuracy under the best one-to-one relabelling."""

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = ["confusion_matrix", "hungarian", "clustering_accuracy", "best_mapping"]


def _labels(y, name):
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"{name} must be 1-d, got shape {y.shape}")
    if y.size and (y.min() < 0 or not np.issubdtype(y.dtype, np.integer)):
        raise ValueError(f"{name} must hold nonnegative integers")
    return y.astype(np.int64)


def confusion_matrix(truth, pred, n_classes=None):
    """Square count matrix with ``C[a, b] = #{i : pred_i = a, truth_i = b}``.

    The matrix is padded with zeros to ``max(#pred labels, #true labels)``.
    """
    truth, pred = _labels(truth, "truth"), _labels(pred, "pred")
    if truth.shape != pred.shape:
        raise ValueError(f"label vectors differ in length: {truth.size} vs {pred.size}")
    size = n_classes or int(max(truth.max(initial=-1), pred.max(initial=-1)) + 1)
    C = np.zeros((size, size), dtype=np.int64)
    np.add.at(C, (pred, truth), 1)
    return C


def hungarian(cost):
    """Minimum-cost permutation: ``perm[row] = column``."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(cost.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm


def best_mapping(truth, pred):
    """Mapping ``predicted label -> true label`` that maximises agreement."""
    C = confusion_matrix(truth, pred)
    return hungarian(-C)


def clustering_accuracy(truth, pred):
    """Fraction of samples whose mapped predicted label equals the true label."""
    truth, pred = _labels(truth, "truth"), _labels(pred, "pred")
    if truth.size == 0:
        raise ValueError("cannot score an empty labelling")
    mapping = best_mapping(truth, pred)
    return float(np.count_nonzero(mapping[pred] == truth)) / truth.size
