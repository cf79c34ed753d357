"""Optimal-noise-level training data for the variance estimator.

Each input is certified under every candidate level; the record keeps the
radii, the argmax level as hard label, the softmax of the radii as soft
label, a class-balancing weight and a consistency weight.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .classifiers import ClassifierError
from .dual import SigmaSet
from .noise import NoiseStream
from .numerics import clopper_pearson_lower, std_normal_quantile
from .smoothing import SamplingPlan, certify, radius_from_bound, sample_counts

log = logging.getLogger(__name__)

__all__ = [
    "EmptyClassError",
    "SigmaRecord",
    "BuilderOptions",
    "BuildResult",
    "soft_label",
    "hard_label",
    "balance_weights",
    "consistency_weight",
    "default_C",
    "build_sigma_dataset",
    "write_jsonl",
    "read_jsonl",
    "write_summary_csv",
]


class EmptyClassError(ValueError):
    """A noise level has no record whose optimum it is."""


@dataclass
class SigmaRecord:
    input_id: int
    features: list
    radii: list
    hard_label: int
    soft_label: list
    w_e: float
    w_r: float
    label: int | None = None


@dataclass(frozen=True)
class BuilderOptions:
    n0: int = 100
    n: int = 10_000
    alpha: float = 0.001
    approximate: bool = False
    subset_fraction: float = 1.0
    subset_seed: int = 0
    filter_uncertifiable: bool = False
    weak_consistency: bool = False
    C: float | None = None

    def __post_init__(self):
        if not 0.0 < self.subset_fraction <= 1.0:
            raise ValueError("subset_fraction must lie in (0, 1]")
        if self.C is not None and not self.C > 0:
            raise ValueError("C must be positive")
        SamplingPlan(self.n0, self.n, self.alpha)


@dataclass
class BuildResult:
    records: list
    dropped: list = field(default_factory=list)
    failed: list = field(default_factory=list)
    selected: list = field(default_factory=list)
    options: BuilderOptions | None = None
    C: float = 0.0

    def manifest(self) -> dict:
        return {
            "records": len(self.records),
            "selected": len(self.selected),
            "subset_fraction": self.options.subset_fraction if self.options else 1.0,
            "subset_seed": self.options.subset_seed if self.options else 0,
            "C": self.C,
            "weak_consistency": bool(self.options and self.options.weak_consistency),
            "dropped_uncertifiable": self.dropped,
            "failed": self.failed,
        }


def default_C(sigma_set) -> float:
    return max(sigma_set) * std_normal_quantile(0.999)


def soft_label(radii) -> np.ndarray:
    """Softmax of the radii."""
    r = np.asarray(radii, dtype=float)
    if not np.all(np.isfinite(r)) or np.any(r < 0):
        raise ValueError("radii must be finite and nonnegative")
    e = np.exp(r - r.max())
    return e / e.sum()


def hard_label(radii) -> int:
    # np.argmax keeps the first maximum, i.e. the smallest noise level
    return int(np.argmax(np.asarray(radii, dtype=float)))


def balance_weights(hard_labels, num_classes: int | None = None) -> np.ndarray:
    """Inverse class frequencies, one weight per noise level.

    Raises :class:`EmptyClassError` when some level never occurs.
    """
    labels = np.asarray(hard_labels, dtype=np.int64)
    if labels.size == 0:
        raise EmptyClassError("no labels given")
    k = int(labels.max()) + 1 if num_classes is None else int(num_classes)
    counts = np.bincount(labels, minlength=k).astype(float)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise EmptyClassError(f"no records for noise-level indices {empty.tolist()}")
    return len(labels) / counts


def consistency_weight(radii, C: float, weak: bool = False, sigma_hat_min: int | None = None) -> float:
    """max(radii) / C, or radii[sigma_hat_min] / C in weak mode, clipped to [0, 1]."""
    if not C > 0:
        raise ValueError("C must be positive")
    r = np.asarray(radii, dtype=float)
    if weak:
        if sigma_hat_min is None:
            raise ValueError("weak consistency needs the minimum predicted noise level")
        value = r[int(sigma_hat_min)]
    else:
        value = r.max()
    return float(np.clip(value / C, 0.0, 1.0))


def _approx_radius(model, x, sigma, options, stream):
    counts = sample_counts(model, x, sigma, options.n, stream)
    top, _ = counts.top_two()
    p_lower = clopper_pearson_lower(int(counts.counts[top]), options.n, options.alpha)
    return top, radius_from_bound(p_lower, sigma)


def _input_radii(classifier_or_pool, x, label, sigma_set, options, stream):
    radii = []
    for i, sigma in enumerate(sigma_set):
        model = classifier_or_pool[sigma] if hasattr(classifier_or_pool, "expert_for") else classifier_or_pool
        s = stream.child("level", i)
        if options.approximate:
            pred, radius = _approx_radius(model, x, sigma, options, s)
        else:
            out = certify(model, x, sigma, SamplingPlan(options.n0, options.n, options.alpha), s)
            pred, radius = out.prediction, out.radius
        if label is not None and pred != label:
            radius = 0.0
        radii.append(float(radius))
    return radii


def build_sigma_dataset(classifier_or_pool, inputs, sigma_set, options: BuilderOptions,
                        stream: NoiseStream, labels=None, ids=None, workers: int = 1) -> BuildResult:
    """Certify each input under every level and assemble the records.

    ``classifier_or_pool`` is a single classifier or an ``ExpertPool``. With
    ``labels`` a wrong prediction counts as radius 0. Inputs whose classifier
    fails are skipped and listed in ``failed``.
    """
    sigma_set = sigma_set if isinstance(sigma_set, SigmaSet) else SigmaSet(sigma_set)
    X = np.asarray(inputs, dtype=float)
    ids = list(range(len(X))) if ids is None else [int(i) for i in ids]
    positions = np.arange(len(X))
    if options.subset_fraction < 1.0:
        rng = np.random.default_rng(options.subset_seed)
        size = max(1, int(round(options.subset_fraction * len(X))))
        positions = np.sort(rng.choice(len(X), size=size, replace=False))

    def work(pos):
        lab = None if labels is None else int(labels[pos])
        try:
            return pos, _input_radii(classifier_or_pool, X[pos], lab, sigma_set, options,
                                     stream.for_input(ids[pos])), None
        except ClassifierError as exc:
            log.warning("input %s skipped: %s", ids[pos], exc)
            return pos, None, str(exc)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, positions))
    else:
        results = [work(p) for p in positions]

    C = options.C if options.C is not None else default_C(sigma_set)
    kept, dropped, failed = [], [], []
    for pos, radii, err in results:
        if err is not None:
            failed.append({"input_id": ids[pos], "error": err})
        elif options.filter_uncertifiable and max(radii) <= 0.0:
            dropped.append(ids[pos])
        else:
            kept.append((pos, radii))

    hard = [hard_label(r) for _, r in kept]
    weights = np.zeros(len(sigma_set))
    if hard:
        counts = np.bincount(hard, minlength=len(sigma_set))
        present = counts > 0
        weights[present] = balance_weights(np.searchsorted(np.flatnonzero(present), hard))
    records = []
    for (pos, radii), h in zip(kept, hard):
        records.append(SigmaRecord(
            input_id=ids[pos],
            features=X[pos].tolist(),
            radii=radii,
            hard_label=h,
            soft_label=soft_label(radii).tolist(),
            w_e=float(weights[h]),
            w_r=consistency_weight(radii, C),
            label=None if labels is None else int(labels[pos]),
        ))
    return BuildResult(records, dropped, failed, [ids[p] for p in positions], options, C)


def write_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec)) + "\n")


def read_jsonl(path) -> list[SigmaRecord]:
    with open(path, encoding="utf-8") as fh:
        return [SigmaRecord(**json.loads(line)) for line in fh if line.strip()]


def write_summary_csv(records, sigma_set, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["input_id"] + [f"radius_sigma_{s:g}" for s in sigma_set] + ["hard_label"])
        for rec in records:
            w.writerow([rec.input_id] + [repr(r) for r in rec.radii] + [rec.hard_label])
