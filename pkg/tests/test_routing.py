import json

import numpy as np
import pytest

from dualsmooth.classifiers import ConstantClassifier, GridTableClassifier, HalfspaceClassifier, save_model
from dualsmooth.dual import DualConfig, SigmaSet, dual_certify
from dualsmooth.noise import NoiseStream
from dualsmooth.routing import ExpertPool, MissingExpertError, load_pool, route_certify

SIGMAS = SigmaSet([0.25, 0.5, 1.0])
EST = GridTableClassifier([0.0, 3.0], [0, 1, 2])
CLF = HalfspaceClassifier([1.0], -1.5)
CFG = DualConfig(SIGMAS, n_sigma=4000, n_cls=4000)


def test_same_model_everywhere_matches_dual():
    pool = ExpertPool({s: CLF for s in SIGMAS})
    for i, x in enumerate([[-2.0], [1.0], [6.0]]):
        stream = NoiseStream(1).for_input(i)
        assert route_certify(EST, pool, x, CFG, stream) == dual_certify(EST, CLF, x, CFG, stream)


def test_unreached_expert_is_irrelevant():
    good = ExpertPool({s: CLF for s in SIGMAS})
    # the estimator never picks 0.25 on the right half line
    bad = good.replace(0.25, ConstantClassifier(0, 1, 2))
    for i, x in enumerate([[4.0], [8.0]]):
        stream = NoiseStream(2).for_input(i)
        assert route_certify(EST, bad, x, CFG, stream) == route_certify(EST, good, x, CFG, stream)


def test_experts_only_used_at_their_level():
    calls = []

    class Spy(HalfspaceClassifier):
        def __init__(self, sigma):
            super().__init__([1.0], -1.5)
            self.sigma = sigma

        def classify_batch(self, xs):
            calls.append(self.sigma)
            return super().classify_batch(xs)

    pool = ExpertPool({s: Spy(s) for s in SIGMAS}, trace=True)
    for i, x in enumerate([[-2.0], [1.0], [6.0], [0.0]]):
        out = route_certify(EST, pool, x, CFG, NoiseStream(3).for_input(i))
        if out.sigma_hat is not None:
            assert pool.trace[-1] == out.sigma_hat
    assert set(pool.trace) == set(calls)
    assert all(c in SIGMAS.values for c in calls)


def test_missing_expert():
    pool = ExpertPool({0.25: CLF, 0.5: CLF})
    with pytest.raises(MissingExpertError):
        route_certify(EST, pool, [0.0], CFG, NoiseStream(0))
    with pytest.raises(MissingExpertError):
        pool.expert_for(1.0)


def test_extra_expert_rejected():
    pool = ExpertPool({0.25: CLF, 0.5: CLF, 1.0: CLF, 2.0: CLF})
    with pytest.raises(ValueError):
        route_certify(EST, pool, [0.0], CFG, NoiseStream(0))


def test_manifest(tmp_path):
    save_model(CLF, tmp_path / "h.json")
    doc = {"experts": {"0.25": "h.json", "0.5": "h.json", "1.0": CLF.to_dict()}}
    (tmp_path / "pool.json").write_text(json.dumps(doc))
    pool = load_pool(tmp_path / "pool.json")
    assert pool.sigmas == (0.25, 0.5, 1.0)
    xs = np.linspace(-3, 3, 50)[:, None]
    assert np.array_equal(pool[1.0].classify_batch(xs), CLF.classify_batch(xs))


def test_empty_pool():
    with pytest.raises(ValueError):
        ExpertPool({})
