"""Confidence-gated label propagation over forest outputs.

The most confident forest inferences are clamped as known labels and
diffused to the rest of the test set over a Gaussian-affinity graph built
in encoded-feature space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from . import core

DEFAULT_CONFIDENT_FRACTION = 0.2
DEFAULT_MAX_ITER = 1000
DEFAULT_TOL = 1e-6


@dataclass(frozen=True)
class AffinityConfig:
    """Graph scale and iteration policy; sigma None means the median heuristic."""

    sigma: float | None = None
    confident_fraction: float = DEFAULT_CONFIDENT_FRACTION
    max_iter: int = DEFAULT_MAX_ITER
    tol: float = DEFAULT_TOL

    def __post_init__(self):
        if self.sigma is not None and self.sigma <= 0:
            raise core.ParameterError(f"sigma must be positive, got {self.sigma}")
        if not 0 < self.confident_fraction <= 1:
            raise core.ParameterError(
                f"confident_fraction must be in (0, 1], got {self.confident_fraction}"
            )


@dataclass
class LabelMatrix:
    """Row-stochastic label probabilities with an index set of clamped rows."""

    y: np.ndarray
    labeled_rows: np.ndarray
    converged: bool = True

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        self.labeled_rows = np.asarray(self.labeled_rows, dtype=np.int64)


def affinity(xi, xj, sigma):
    """exp(-d^2/sigma) for the Euclidean distance d between the two vectors."""
    if sigma <= 0:
        raise core.ParameterError(f"sigma must be positive, got {sigma}")
    xi = np.asarray(xi, dtype=np.float64).reshape(-1)
    xj = np.asarray(xj, dtype=np.float64).reshape(-1)
    if xi.shape != xj.shape:
        raise core.ValidationError(f"dimension mismatch: {xi.shape} vs {xj.shape}")
    return float(np.exp(-np.sum((xi - xj) ** 2) / sigma))


def transition_matrix(features, sigma):
    """Column-normalized Gaussian affinities (self-affinity 1 on the diagonal)."""
    x = core.as_matrix(features)
    if x.shape[0] < 2:
        raise core.InsufficientDataError("transition matrix needs at least 2 samples")
    if sigma <= 0:
        raise core.ParameterError(f"sigma must be positive, got {sigma}")
    w = np.exp(-cdist(x, x, "sqeuclidean") / sigma)
    return w / w.sum(axis=0, keepdims=True)


def median_squared_distance(features):
    """Median of squared pairwise distances; the default graph scale."""
    x = core.as_matrix(features)
    if x.shape[0] < 2:
        return 1.0
    sq = pdist(x, "sqeuclidean")
    med = float(np.median(sq))
    if med > 0:
        return med
    mean = float(sq.mean())
    return mean if mean > 0 else 1.0


def propagate(transition, y0, cfg=AffinityConfig()):
    """Iterate Y <- T Y with row normalization and clamped labeled rows.

    Stops when the largest absolute change drops below cfg.tol; hitting
    cfg.max_iter first returns the current state with converged=False.
    """
    y = np.array(y0.y, dtype=np.float64)
    labeled = np.asarray(y0.labeled_rows, dtype=np.int64)
    clamp = y[labeled].copy()
    converged = False
    for _ in range(cfg.max_iter):
        nxt = transition @ y
        sums = nxt.sum(axis=1)
        positive = sums > 0
        nxt[positive] /= sums[positive, None]
        nxt[labeled] = clamp
        if np.abs(nxt - y).max() < cfg.tol:
            y = nxt
            converged = True
            break
        y = nxt
    return LabelMatrix(y, labeled, converged)


def refine_predictions(encoded_test, predictions, cfg=AffinityConfig(),
                       num_classes=None):
    """Propagate the top-confidence forest labels to the rest of the test set.

    The top ceil(confident_fraction * n) instances by confidence (ties by
    ascending index) are clamped to their forest labels; everything else
    starts uniform. Returns one refined label per instance; clamped
    instances keep their forest labels.
    """
    n = len(encoded_test)
    if n == 0:
        raise core.InsufficientDataError("empty test set")
    if len(predictions) != n:
        raise core.ValidationError(
            f"{n} samples vs {len(predictions)} predictions"
        )
    if num_classes is None:
        if predictions[0].votes is None:
            raise core.ParameterError("num_classes required when votes are absent")
        num_classes = len(predictions[0].votes)

    forest_labels = np.array([p.label for p in predictions], dtype=np.int64)
    confidence = np.array([p.confidence for p in predictions])
    order = np.argsort(-confidence, kind="stable")
    n_labeled = min(n, math.ceil(cfg.confident_fraction * n))
    labeled = np.sort(order[:n_labeled])

    if n == 1:
        return forest_labels.copy()

    features = np.vstack([s.features for s in encoded_test])
    sigma = cfg.sigma if cfg.sigma is not None else median_squared_distance(features)
    transition = transition_matrix(features, sigma)

    y0 = np.full((n, num_classes), 1.0 / num_classes)
    y0[labeled] = 0.0
    y0[labeled, forest_labels[labeled]] = 1.0
    result = propagate(transition, LabelMatrix(y0, labeled), cfg)

    refined = result.y.argmax(axis=1).astype(np.int64)
    refined[labeled] = forest_labels[labeled]
    return refined
