"""Standard Gaussian randomized smoothing: class counting under noise,
prediction with abstention, and certification of an l2 radius."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .classifiers import BaseClassifier, DimensionMismatchError
from .noise import BLOCK_SIZE, NoiseStream
from .numerics import binomial_pvalue_two_sided, clopper_pearson_lower, std_normal_quantile

__all__ = [
    "ABSTAIN",
    "SamplingPlan",
    "CountVector",
    "CertifiedOutcome",
    "sample_counts",
    "predict",
    "predict_from_counts",
    "certify",
    "radius_from_bound",
]

ABSTAIN = -1


@dataclass(frozen=True)
class SamplingPlan:
    n0: int = 100
    n: int = 10_000
    alpha: float = 0.001

    def __post_init__(self):
        if self.n0 < 1 or self.n < 1:
            raise ValueError("sampling plan needs n0 >= 1 and n >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")


@dataclass(frozen=True)
class CountVector:
    counts: np.ndarray = field(compare=False)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def top_two(self) -> tuple[int, int]:
        """Indices of the largest and second largest count (lowest index first on ties)."""
        order = np.argsort(-self.counts, kind="stable")
        second = int(order[1]) if len(order) > 1 else int(order[0])
        return int(order[0]), second

    def __eq__(self, other):
        return isinstance(other, CountVector) and np.array_equal(self.counts, other.counts)

    def __add__(self, other: "CountVector") -> "CountVector":
        return CountVector(self.counts + other.counts)


@dataclass(frozen=True)
class CertifiedOutcome:
    prediction: int
    p_lower: float
    radius: float
    counts: CountVector
    sigma: float

    @property
    def abstained(self) -> bool:
        return self.prediction == ABSTAIN


def _block_counts(model, x, sigma, stream, block, size):
    noise = stream.standard_normal(block, size, x.shape[0])
    labels = model.classify_batch(x[None, :] + sigma * noise)
    return np.bincount(labels, minlength=model.num_classes)


def sample_counts(model: BaseClassifier, x, sigma: float, n: int, stream: NoiseStream,
                  workers: int = 1, block_size: int = BLOCK_SIZE) -> CountVector:
    """Classify ``n`` Gaussian perturbations of ``x`` and count the labels.

    Noise comes in fixed-size blocks keyed by block index, so the result is
    the same for any ``workers``.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != model.dim:
        raise DimensionMismatchError(f"input has dimension {x.shape[0]}, model expects {model.dim}")
    jobs = list(stream.blocks(n, block_size))
    counts = np.zeros(model.num_classes, dtype=np.int64)
    if workers <= 1 or len(jobs) == 1:
        for block, size in jobs:
            counts += _block_counts(model, x, sigma, stream, block, size)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for part in pool.map(lambda job: _block_counts(model, x, sigma, stream, *job), jobs):
                counts += part
    return CountVector(counts)


def predict(model: BaseClassifier, x, sigma: float, n: int, alpha: float, stream: NoiseStream,
            workers: int = 1) -> int:
    """Top class under noise, or ABSTAIN when the two-sided binomial test of
    top versus runner-up is not significant at ``alpha``."""
    return predict_from_counts(sample_counts(model, x, sigma, n, stream, workers=workers), alpha)


def predict_from_counts(counts: CountVector, alpha: float) -> int:
    """The abstention test of :func:`predict` applied to given counts."""
    top, second = counts.top_two()
    n_top = int(counts.counts[top])
    n_second = int(counts.counts[second]) if second != top else 0
    if binomial_pvalue_two_sided(n_top, n_top + n_second, 0.5) > alpha:
        return ABSTAIN
    return top


def radius_from_bound(p_lower: float, sigma: float) -> float:
    if p_lower <= 0.5:
        return 0.0
    return sigma * std_normal_quantile(p_lower)


def certify(model: BaseClassifier, x, sigma: float, plan: SamplingPlan, stream: NoiseStream,
            workers: int = 1) -> CertifiedOutcome:
    """Two-stage certification: guess the class from ``plan.n0`` samples,
    lower-bound its probability from ``plan.n`` fresh samples, and report
    ``sigma * Phi^-1(p_lower)`` (or abstain when the bound is at most 1/2)."""
    guess_counts = sample_counts(model, x, sigma, plan.n0, stream.child("select"), workers=workers)
    guess, _ = guess_counts.top_two()
    counts = sample_counts(model, x, sigma, plan.n, stream.child("estimate"), workers=workers)
    p_lower = clopper_pearson_lower(int(counts.counts[guess]), plan.n, plan.alpha)
    if p_lower <= 0.5:
        return CertifiedOutcome(ABSTAIN, p_lower, 0.0, counts, sigma)
    return CertifiedOutcome(guess, p_lower, radius_from_bound(p_lower, sigma), counts, sigma)
