"""Exact smoothed-classifier probabilities for halfspaces and 1D/2D grid
tables, used as ground truth for every Monte Carlo check.

Under N(x, sigma^2 I) a halfspace has mass Phi(margin / (sigma |w|)) on its
positive side, and an axis-aligned cell factorises into a product of 1D
Gaussian interval masses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classifiers import BaseClassifier, GridTableClassifier, HalfspaceClassifier
from .numerics import std_normal_cdf, std_normal_quantile

__all__ = [
    "OracleResult",
    "halfspace_probability",
    "interval_mass",
    "grid_probability_1d",
    "grid_probability_2d",
    "exact_probabilities",
    "exact_radius",
    "oracle",
    "exact_dual_predict",
]


@dataclass(frozen=True)
class OracleResult:
    probabilities: np.ndarray
    top_class: int
    radius: float


def halfspace_probability(w, b: float, x, sigma: float):
    """Probability of class 1 (positive side) under Gaussian smoothing.

    ``x`` may be one point or an ``(m, d)`` array of points.
    """
    w = np.asarray(w, dtype=float)
    norm = np.linalg.norm(w)
    if not norm > 0:
        raise ValueError("weight must be nonzero")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    x = np.asarray(x, dtype=float)
    margin = x @ w + b
    return std_normal_cdf(margin / (sigma * norm))


def interval_mass(lo, hi):
    """P(lo < Z < hi) for standard normal Z, elementwise, accurate in both
    tails (differences are taken on the side where the CDF is small)."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    lo_c = np.clip(lo, -40.0, 40.0)
    hi_c = np.clip(hi, -40.0, 40.0)
    upper = lo_c > 0
    left = std_normal_cdf(hi_c) - std_normal_cdf(lo_c)
    right = std_normal_cdf(-lo_c) - std_normal_cdf(-hi_c)
    return np.maximum(np.where(upper, right, left), 0.0)


def _axis_masses(bounds: np.ndarray, coords: np.ndarray, sigma: float) -> np.ndarray:
    edges = np.concatenate(([-np.inf], bounds, [np.inf]))
    z = (edges[None, :] - coords[:, None]) / sigma
    return interval_mass(z[:, :-1], z[:, 1:])


def _as_points(x, dim):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = x.reshape(-1, dim)
    return x, single


def grid_probability_1d(classifier: GridTableClassifier, x, sigma: float) -> np.ndarray:
    """Per-class smoothed probabilities of a 1D grid table; shape ``(K,)`` for
    one point or ``(m, K)`` for several."""
    if classifier.dim != 1:
        raise ValueError("grid_probability_1d needs a one-dimensional grid")
    pts, single = _as_points(x, 1)
    masses = _axis_masses(classifier.boundaries[0], pts[:, 0], sigma)
    probs = np.zeros((len(pts), classifier.num_classes))
    for cell, label in enumerate(classifier.labels):
        probs[:, label] += masses[:, cell]
    return probs[0] if single else probs


def grid_probability_2d(classifier: GridTableClassifier, x, sigma: float) -> np.ndarray:
    if classifier.dim != 2:
        raise ValueError("grid_probability_2d needs a two-dimensional grid")
    pts, single = _as_points(x, 2)
    m0 = _axis_masses(classifier.boundaries[0], pts[:, 0], sigma)
    m1 = _axis_masses(classifier.boundaries[1], pts[:, 1], sigma)
    probs = np.empty((len(pts), classifier.num_classes))
    for c in range(classifier.num_classes):
        mask = (classifier.labels == c).astype(float)
        probs[:, c] = np.einsum("pi,ij,pj->p", m0, mask, m1)
    return probs[0] if single else probs


def exact_probabilities(classifier: BaseClassifier, x, sigma: float) -> np.ndarray:
    if isinstance(classifier, HalfspaceClassifier):
        p1 = halfspace_probability(classifier.weight, classifier.bias, x, sigma)
        return np.stack([1.0 - np.asarray(p1), np.asarray(p1)], axis=-1)
    if isinstance(classifier, GridTableClassifier):
        if classifier.dim == 1:
            return grid_probability_1d(classifier, x, sigma)
        return grid_probability_2d(classifier, x, sigma)
    raise TypeError(f"no exact oracle for {type(classifier).__name__}")


def exact_radius(probs, sigma: float) -> float:
    """sigma * Phi^-1(top probability); 0 when the top probability is at most 1/2."""
    p = float(np.max(probs))
    if p <= 0.5:
        return 0.0
    if p >= 1.0:
        return float("inf")
    return sigma * std_normal_quantile(p)


def oracle(classifier: BaseClassifier, x, sigma: float) -> OracleResult:
    probs = exact_probabilities(classifier, x, sigma)
    return OracleResult(probs, int(np.argmax(probs)), exact_radius(probs, sigma))


def exact_dual_predict(estimator: BaseClassifier, classifier_for, sigma_values, sigma_e: float, xs):
    """Exact prediction of the input-dependent smoothed classifier at each row
    of ``xs``: the smoothed estimator picks the noise level, then the chosen
    classifier is smoothed at that level.

    ``classifier_for`` maps a sigma-set index to the classifier used there.
    Returns ``(sigma_index, label)`` arrays.
    """
    xs = np.asarray(xs, dtype=float)
    est = exact_probabilities(estimator, xs, sigma_e)
    idx = np.argmax(est, axis=-1)
    labels = np.empty(len(xs), dtype=np.int64)
    for i in np.unique(idx):
        sel = idx == i
        probs = exact_probabilities(classifier_for(int(i)), xs[sel], float(sigma_values[i]))
        labels[sel] = np.argmax(probs, axis=-1)
    return idx, labels
