"""Routing: the variance estimator picks one expert per input, and that expert
is only ever smoothed at its own noise level."""

from __future__ import annotations

import json
from pathlib import Path

from .classifiers import BaseClassifier, load_model, model_from_dict
from .dual import DualConfig, DualOutcome, dual_certify
from .noise import NoiseStream

__all__ = ["MissingExpertError", "ExpertPool", "route_certify", "load_pool"]


class MissingExpertError(KeyError):
    pass


class ExpertPool:
    """One expert per candidate noise level.

    ``expert_for(sigma)`` is the only way in; every lookup is appended to
    ``trace`` when tracing is on so tests can confirm no expert is used at a
    foreign level.
    """

    def __init__(self, experts: dict, trace: bool = False):
        if not experts:
            raise ValueError("an expert pool needs at least one expert")
        self._experts = {float(s): m for s, m in experts.items()}
        self.trace: list | None = [] if trace else None

    @property
    def sigmas(self) -> tuple:
        return tuple(sorted(self._experts))

    def __getitem__(self, sigma):
        return self.expert_for(sigma)

    def expert_for(self, sigma: float) -> BaseClassifier:
        try:
            model = self._experts[float(sigma)]
        except KeyError:
            raise MissingExpertError(f"no expert for sigma={sigma}") from None
        if self.trace is not None:
            self.trace.append(float(sigma))
        return model

    def replace(self, sigma: float, model: BaseClassifier) -> "ExpertPool":
        experts = dict(self._experts)
        if float(sigma) not in experts:
            raise MissingExpertError(f"no expert for sigma={sigma}")
        experts[float(sigma)] = model
        return ExpertPool(experts, trace=self.trace is not None)

    def check_matches(self, config: DualConfig):
        if self.sigmas != tuple(config.sigma_set.values):
            missing = set(config.sigma_set.values) - set(self.sigmas)
            if missing:
                raise MissingExpertError(f"no expert for sigma in {sorted(missing)}")
            raise ValueError(f"pool levels {self.sigmas} differ from the sigma set {config.sigma_set.values}")


def route_certify(estimator: BaseClassifier, pool: ExpertPool, x, config: DualConfig,
                  stream: NoiseStream, shared_noise: bool = False, workers: int = 1) -> DualOutcome:
    """Dual certification where stage two uses ``pool[sigma_hat]``."""
    pool.check_matches(config)
    return dual_certify(estimator, pool.expert_for, x, config, stream,
                        shared_noise=shared_noise, workers=workers)


def load_pool(path) -> ExpertPool:
    """Read a pool manifest: ``{"experts": {"0.25": "a.json", "1.0": {...}}}``.

    Values are model-file paths (relative to the manifest) or inline model
    documents, which covers external endpoints.
    """
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    entries = doc.get("experts", doc)
    experts = {}
    for key, value in entries.items():
        if isinstance(value, str):
            experts[float(key)] = load_model(path.parent / value)
        else:
            experts[float(key)] = model_from_dict(value, base_dir=str(path.parent))
    return ExpertPool(experts)
