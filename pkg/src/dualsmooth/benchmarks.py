"""A 2D Gaussian-mixture benchmark whose two clusters want different noise
levels.

Left cluster: narrow horizontal stripes with alternating labels, so only a
small sigma keeps a majority. Right cluster: two classes split by a wide
margin, where a large sigma buys the biggest radius. The base classifier is an
axis-aligned grid table, which keeps every smoothed probability exact.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .classifiers import GridTableClassifier, MlpClassifier
from .dual import DualConfig, SigmaSet
from .noise import NoiseStream
from .report import certified_accuracy, radius_grid
from .sigma_dataset import BuilderOptions, build_sigma_dataset
from .smoothing import SamplingPlan, certify
from .training import TrainingConfig, train_estimator

__all__ = [
    "MIXTURE_SIGMAS",
    "mixture_classifier",
    "sample_mixture",
    "train_mixture_estimator",
    "MixtureCurves",
    "mixture_curves",
]

MIXTURE_SIGMAS = (0.25, 0.5, 1.0)

_STRIPES = np.array([-2.5, -1.5, -0.5, 0.0, 0.5, 1.5, 2.5])


def mixture_classifier() -> GridTableClassifier:
    left = [0, 1, 2, 0, 0, 1, 2, 0]   # stripe k gets label k mod 3
    right = [1, 1, 1, 1, 0, 0, 0, 0]  # sign of x2
    return GridTableClassifier([[0.0], _STRIPES], [left, right], num_classes=3)


def sample_mixture(n: int, seed: int, right_fraction: float = 0.5):
    """``(X, y)`` with ``round(n * right_fraction)`` points in the right cluster."""
    rng = np.random.default_rng(seed)
    n_right = int(round(n * right_fraction))
    n_left = n - n_right
    k = rng.integers(-2, 3, size=n_left)
    left = np.column_stack([rng.normal(-3.0, 0.4, n_left), k + rng.normal(0.0, 0.08, n_left)])
    y_left = np.mod(k, 3)
    sign = rng.integers(0, 2, size=n_right)
    x2 = np.where(sign == 0, 1.0, -1.0) * (2.0 + rng.normal(0.0, 0.4, n_right))
    right = np.column_stack([rng.normal(4.5, 0.5, n_right), x2])
    y_right = (x2 < 0).astype(np.int64)
    X = np.vstack([left, right])
    y = np.concatenate([y_left, y_right]).astype(np.int64)
    order = rng.permutation(n)
    return X[order], y[order]


def train_mixture_estimator(n_train: int = 200, seed: int = 0, dataset_n: int = 1000,
                            config: TrainingConfig | None = None) -> MlpClassifier:
    """Build the noise-level dataset with a reduced sample budget and fit a
    small estimator on it."""
    X, y = sample_mixture(n_train, seed)
    sigma_set = SigmaSet(MIXTURE_SIGMAS)
    built = build_sigma_dataset(mixture_classifier(), X, sigma_set,
                                BuilderOptions(n0=100, n=dataset_n, alpha=0.001),
                                NoiseStream(seed).child("dataset"), labels=y)
    config = config or TrainingConfig(lam=1.0, eta=0.0, m=2, sigma_e=max(MIXTURE_SIGMAS), epochs=60,
                                      batch_size=32, lr=0.05, seed=seed, hidden=(16,))
    return train_estimator(built.records, config).model


@dataclass
class MixtureCurves:
    grid: np.ndarray
    baselines: dict
    dual: np.ndarray


def mixture_curves(estimator, X, y, config: DualConfig | None = None, seed: int = 0,
                   alpha_total: float = 0.001, grid=None) -> MixtureCurves:
    """Certified-accuracy curves of single-sigma smoothing at each level and of
    the dual pipeline, all with the same total failure budget."""
    from .dual import dual_certify

    clf = mixture_classifier()
    config = config or DualConfig(SigmaSet(MIXTURE_SIGMAS))
    grid = radius_grid() if grid is None else np.asarray(grid, dtype=float)
    root = NoiseStream(seed)
    plan = replace(config.plan_cls, alpha=alpha_total)
    baselines = {}
    for sigma in config.sigma_set:
        correct, radii = [], []
        for i, (x, label) in enumerate(zip(X, y)):
            out = certify(clf, x, sigma, plan, root.for_input(i).child("single", sigma))
            correct.append(out.prediction == label)
            radii.append(out.radius)
        baselines[sigma] = certified_accuracy(correct, radii, grid)
    correct, radii = [], []
    for i, (x, label) in enumerate(zip(X, y)):
        out = dual_certify(estimator, clf, x, config, root.for_input(i))
        correct.append(not out.abstained and out.y_hat == label)
        radii.append(out.R_final)
    return MixtureCurves(grid, baselines, certified_accuracy(correct, radii, grid))
