"""Dual randomized smoothing.

Stage one smooths a variance estimator (a classifier over the candidate
noise levels) at a global level ``sigma_e`` and certifies that its choice is
locally constant. Stage two smooths the classifier at the chosen level. The
final radius is the smaller of the two, and the two failure budgets add up
by the union bound, so the stages may even share noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .classifiers import BaseClassifier
from .noise import NoiseStream
from .numerics import clopper_pearson_lower
from .smoothing import ABSTAIN, CertifiedOutcome, SamplingPlan, certify, predict, radius_from_bound

__all__ = [
    "SigmaSet",
    "BudgetSplit",
    "DualConfig",
    "DualOutcome",
    "combine_radii",
    "dual_predict",
    "dual_certify",
    "budget_table",
    "BudgetRow",
]


@dataclass(frozen=True)
class SigmaSet:
    values: tuple

    def __init__(self, values):
        vals = tuple(float(v) for v in values)
        if len(vals) < 2:
            raise ValueError("a sigma set needs at least two candidates")
        if any(not v > 0 for v in vals):
            raise ValueError("noise levels must be positive")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError("noise levels must be strictly increasing")
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]

    def __iter__(self):
        return iter(self.values)

    def index(self, sigma: float) -> int:
        return self.values.index(float(sigma))

    @property
    def max(self) -> float:
        return self.values[-1]


@dataclass(frozen=True)
class BudgetSplit:
    """Failure budget for the estimator stage and the classifier stage."""

    alpha_total: float = 0.001
    alpha_sigma: float = 0.0005
    alpha_cls: float = 0.0005

    def __post_init__(self):
        for name in ("alpha_total", "alpha_sigma", "alpha_cls"):
            a = getattr(self, name)
            if not 0.0 < a < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {a}")
        # a few ulps of slack for ratio-derived splits
        if self.alpha_sigma + self.alpha_cls > self.alpha_total * (1 + 1e-12):
            raise ValueError("alpha_sigma + alpha_cls exceeds alpha_total")

    @classmethod
    def from_ratio(cls, alpha_total: float, cls_part: float = 1.0, sigma_part: float = 1.0) -> "BudgetSplit":
        """Split ``alpha_total`` as classifier:estimator = ``cls_part:sigma_part``."""
        if cls_part <= 0 or sigma_part <= 0:
            raise ValueError("budget ratio parts must be positive")
        total = cls_part + sigma_part
        a_cls = alpha_total * cls_part / total
        return cls(alpha_total, alpha_total - a_cls, a_cls)


@dataclass(frozen=True)
class DualConfig:
    sigma_set: SigmaSet
    sigma_e: float | None = None
    n0_sigma: int = 100
    n_sigma: int = 10_000
    n0_cls: int = 100
    n_cls: int = 10_000
    split: BudgetSplit = field(default_factory=BudgetSplit)

    def __post_init__(self):
        if not isinstance(self.sigma_set, SigmaSet):
            object.__setattr__(self, "sigma_set", SigmaSet(self.sigma_set))
        if self.sigma_e is None:
            object.__setattr__(self, "sigma_e", self.sigma_set.max)
        if self.sigma_e < self.sigma_set.max:
            raise ValueError(
                f"sigma_e={self.sigma_e} is below the largest candidate {self.sigma_set.max}"
            )

    @property
    def plan_sigma(self) -> SamplingPlan:
        return SamplingPlan(self.n0_sigma, self.n_sigma, self.split.alpha_sigma)

    @property
    def plan_cls(self) -> SamplingPlan:
        return SamplingPlan(self.n0_cls, self.n_cls, self.split.alpha_cls)


@dataclass(frozen=True)
class DualOutcome:
    sigma_index: int
    sigma_hat: float | None
    R_sigma: float
    y_hat: int
    R_c: float
    R_final: float
    alpha_sigma: float
    alpha_cls: float
    alpha_total: float
    p_sigma_lower: float = 0.0
    p_cls_lower: float = 0.0

    @property
    def abstained(self) -> bool:
        return self.y_hat == ABSTAIN


def combine_radii(r_sigma: float, r_c: float) -> float:
    if r_sigma < 0 or r_c < 0:
        raise ValueError("radii must be nonnegative")
    return min(r_sigma, r_c)


def _stage_streams(stream: NoiseStream, shared: bool):
    if shared:
        return stream, stream
    return stream.child("sigma"), stream.child("cls")


def dual_predict(estimator: BaseClassifier, classifier_for, x, config: DualConfig,
                 stream: NoiseStream, shared_noise: bool = False, workers: int = 1):
    """Return ``(sigma_hat, y_hat)``; ``sigma_hat`` is None and ``y_hat`` is
    ABSTAIN when the estimator abstains.

    ``classifier_for`` is a classifier used at every level or a callable
    mapping a noise level to the classifier for it.
    """
    pick = _classifier_picker(classifier_for)
    s1, s2 = _stage_streams(stream, shared_noise)
    idx = predict(estimator, x, config.sigma_e, config.n_sigma, config.split.alpha_sigma, s1, workers)
    if idx == ABSTAIN:
        return None, ABSTAIN
    sigma_hat = config.sigma_set[idx]
    y = predict(pick(sigma_hat), x, sigma_hat, config.n_cls, config.split.alpha_cls, s2, workers)
    return sigma_hat, y


def _classifier_picker(classifier_for):
    if isinstance(classifier_for, BaseClassifier):
        return lambda sigma: classifier_for
    return classifier_for


def _check_estimator(estimator: BaseClassifier, config: DualConfig):
    if estimator.num_classes != len(config.sigma_set):
        raise ValueError(
            f"estimator has {estimator.num_classes} outputs but the sigma set has {len(config.sigma_set)}"
        )


def dual_certify(estimator: BaseClassifier, classifier_for, x, config: DualConfig,
                 stream: NoiseStream, shared_noise: bool = False, workers: int = 1) -> DualOutcome:
    """Certify the noise-level choice, then the class under that level.

    With ``shared_noise`` both stages draw from the same stream, which is
    allowed because the guarantee only uses the union bound.
    """
    _check_estimator(estimator, config)
    pick = _classifier_picker(classifier_for)
    split = config.split
    s1, s2 = _stage_streams(stream, shared_noise)
    est = certify(estimator, x, config.sigma_e, config.plan_sigma, s1, workers)
    if est.abstained:
        return DualOutcome(ABSTAIN, None, 0.0, ABSTAIN, 0.0, 0.0, split.alpha_sigma,
                           split.alpha_cls, split.alpha_total, est.p_lower, 0.0)
    sigma_hat = config.sigma_set[est.prediction]
    cls: CertifiedOutcome = certify(pick(sigma_hat), x, sigma_hat, config.plan_cls, s2, workers)
    if cls.abstained:
        return DualOutcome(est.prediction, sigma_hat, est.radius, ABSTAIN, 0.0, 0.0,
                           split.alpha_sigma, split.alpha_cls, split.alpha_total,
                           est.p_lower, cls.p_lower)
    return DualOutcome(est.prediction, sigma_hat, est.radius, cls.prediction, cls.radius,
                       combine_radii(est.radius, cls.radius), split.alpha_sigma, split.alpha_cls,
                       split.alpha_total, est.p_lower, cls.p_lower)


@dataclass(frozen=True)
class BudgetRow:
    cls_part: float
    sigma_part: float
    success_fraction: float
    alpha_cls: float
    p_lower: float
    radius: float


def budget_table(N: int, sigma: float, success_fractions, splits, total: float = 0.001) -> list[BudgetRow]:
    """Classification radius when ``total`` is shared with an estimator stage.

    For each ``(cls_part, sigma_part)`` ratio the classifier keeps
    ``total * cls_part / (cls_part + sigma_part)``; a zero ``sigma_part`` is
    plain single-stage smoothing. ``success_fractions`` are empirical top-class
    frequencies, turned into counts out of ``N``.
    """
    if not 0.0 < total < 1.0:
        raise ValueError("total budget must lie in (0, 1)")
    rows = []
    for frac in np.atleast_1d(success_fractions):
        k = int(round(float(frac) * N))
        for a, b in splits:
            if a <= 0 or b < 0:
                raise ValueError("split parts must be positive (estimator part may be zero)")
            a_cls = total * a / (a + b)
            p_lower = clopper_pearson_lower(k, N, a_cls)
            rows.append(BudgetRow(float(a), float(b), float(frac), a_cls, p_lower,
                                  radius_from_bound(p_lower, sigma)))
    return rows
