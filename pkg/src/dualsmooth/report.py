"""Per-input certification rows and the summaries derived from them."""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields

import numpy as np

from .classifiers import BaseClassifier
from .dual import DualConfig, DualOutcome
from .smoothing import ABSTAIN, certify

__all__ = [
    "ReportRow",
    "radius_grid",
    "certified_accuracy",
    "ecdf",
    "per_sigma_radii",
    "row_from_outcome",
    "write_report_csv",
    "read_report_csv",
    "write_curve_csv",
    "write_ecdf_csv",
]


@dataclass
class ReportRow:
    input_id: int
    label: int
    sigma_index: int
    sigma_hat: float
    R_sigma: float
    y_hat: int
    R_c: float
    R_final: float
    correct: int
    alpha_sigma: float
    alpha_cls: float
    alpha_total: float
    R_c_star: float = float("nan")
    delta_R_c: float = float("nan")
    delta_R_sigma: float = float("nan")


def radius_grid(stop: float = 2.5, step: float = 0.25) -> np.ndarray:
    if not step > 0 or stop < 0:
        raise ValueError("need step > 0 and stop >= 0")
    count = int(round(stop / step)) + 1
    return np.round(np.arange(count) * step, 12)


def certified_accuracy(correct, radii, grid) -> np.ndarray:
    """Fraction of inputs that are correct (abstentions count as wrong) with
    radius at least r, for each r in ``grid``."""
    correct = np.asarray(correct, dtype=bool)
    radii = np.asarray(radii, dtype=float)
    if correct.size == 0:
        return np.zeros(len(grid))
    return np.array([np.mean(correct & (radii >= r)) for r in grid])


def ecdf(values):
    """Sorted values and their empirical CDF levels."""
    v = np.sort(np.asarray(values, dtype=float))
    v = v[np.isfinite(v)]
    return v, np.arange(1, v.size + 1) / max(v.size, 1)


def per_sigma_radii(classifier_for, x, label, config: DualConfig, stream) -> list:
    """Stage-two radius at every level, using the stage-two budget and noise,
    counted as 0 when wrong. The maximum is R_c* for the gap metric."""
    pick = (lambda s: classifier_for) if isinstance(classifier_for, BaseClassifier) else classifier_for
    out = []
    for sigma in config.sigma_set:
        res = certify(pick(sigma), x, sigma, config.plan_cls, stream)
        ok = res.prediction != ABSTAIN and (label is None or res.prediction == label)
        out.append(res.radius if ok else 0.0)
    return out


def row_from_outcome(input_id: int, label: int, out: DualOutcome, star=None) -> ReportRow:
    correct = int(not out.abstained and out.y_hat == label)
    row = ReportRow(
        input_id=int(input_id), label=int(label), sigma_index=int(out.sigma_index),
        sigma_hat=float("nan") if out.sigma_hat is None else float(out.sigma_hat),
        R_sigma=float(out.R_sigma), y_hat=int(out.y_hat), R_c=float(out.R_c),
        R_final=float(out.R_final), correct=correct, alpha_sigma=out.alpha_sigma,
        alpha_cls=out.alpha_cls, alpha_total=out.alpha_total,
    )
    if out.sigma_hat is not None:
        row.delta_R_sigma = float(out.R_sigma - out.R_c)
    if star is not None:
        row.R_c_star = float(max(star))
        achieved = out.R_c if correct else 0.0
        row.delta_R_c = max(row.R_c_star - achieved, 0.0)
    return row


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_report_csv(rows, path) -> None:
    names = [f.name for f in fields(ReportRow)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in rows:
            w.writerow([_fmt(getattr(row, n)) for n in names])


def read_report_csv(path) -> list[ReportRow]:
    types = {f.name: f.type for f in fields(ReportRow)}
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            kw = {}
            for name, value in rec.items():
                kw[name] = int(value) if types[name] == "int" else float(value)
            rows.append(ReportRow(**kw))
    return rows


def write_curve_csv(grid, accuracy, path, label: str = "certified_accuracy") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["radius", label])
        for r, a in zip(grid, accuracy):
            w.writerow([_fmt(r), _fmt(a)])


def write_ecdf_csv(values, path, name: str) -> None:
    xs, ps = ecdf(values)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([name, "ecdf"])
        for x, p in zip(xs, ps):
            w.writerow([_fmt(x), _fmt(p)])
