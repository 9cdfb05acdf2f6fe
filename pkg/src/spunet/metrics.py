"""Distribution-level segmentation metrics over sets of binary masks.

The Hungarian-matched score replicates the annotation set up to the
prediction count, matches with a 1 - IoU cost, and averages the matched
costs.  Empty-vs-empty pairs count as a perfect match (cost 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import assignment


@dataclass
class EvalReport:
    ewd: float
    ged: float
    n_predictions: int
    n_annotations: int


def _as_mask(m) -> np.ndarray:
    arr = np.asarray(m)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2-d, got shape {arr.shape}")
    return arr.astype(bool)


def iou(a, b) -> float:
    """Intersection over union; both-empty masks score 1 (a correct empty
    prediction is a perfect match, so its 1 - IoU cost is 0)."""
    a, b = _as_mask(a), _as_mask(b)
    if a.shape != b.shape:
        raise ValueError(f"iou: mask shapes differ, {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def _cost_table(predictions, annotations) -> np.ndarray:
    return np.array([[1.0 - iou(p, a) for a in annotations] for p in predictions])


def ewd(predictions, annotations) -> float:
    """Hungarian-matched mean 1 - IoU between predictions and annotations.

    Annotations are replicated to the prediction count, which must be a
    positive multiple of the annotation count.  Lies in [0, 1].
    """
    n, m = len(predictions), len(annotations)
    if m == 0 or n == 0 or n % m != 0:
        raise ValueError(f"ewd: prediction count {n} must be a positive multiple "
                         f"of annotation count {m}")
    replicated = list(annotations) * (n // m)
    cost = _cost_table(predictions, replicated)
    _, total = assignment.solve(cost)
    return total / n


def ged(predictions, annotations) -> float:
    """Generalized energy distance with the 1 - IoU kernel.

    GED^2 = 2 E[d(S, Y)] - E[d(S, S')] - E[d(Y, Y')], with within-set
    expectations over distinct index pairs only (0 when a set has a single
    element).  The estimator can dip negative on finite samples, so the
    result is sqrt(max(GED^2, 0)).
    """
    if len(predictions) == 0 or len(annotations) == 0:
        raise ValueError("ged: prediction and annotation lists must be nonempty")
    cross = _cost_table(predictions, annotations).mean()
    within_p = _within_mean(predictions)
    within_a = _within_mean(annotations)
    ged_sq = 2.0 * cross - within_p - within_a
    return float(np.sqrt(max(ged_sq, 0.0)))


def _within_mean(masks) -> float:
    n = len(masks)
    if n < 2:
        return 0.0
    total = 0.0
    for i in range(n):
        for j in range(n):
            if i != j:
                total += 1.0 - iou(masks[i], masks[j])
    return total / (n * (n - 1))
