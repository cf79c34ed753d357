import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dualsmooth.benchmarks import MIXTURE_SIGMAS, sample_mixture, train_mixture_estimator
from dualsmooth.classifiers import ConstantClassifier, MlpClassifier, load_model
from dualsmooth.dual import DualConfig, SigmaSet, dual_certify
from dualsmooth.noise import NoiseStream
from dualsmooth.report import certified_accuracy, radius_grid
from dualsmooth.sigma_dataset import BuilderOptions, SigmaRecord, soft_label
from dualsmooth.training import (
    TrainingConfig,
    TrainingDivergedError,
    alternating_schedule,
    consistency_grad,
    consistency_loss,
    consistency_terms,
    estimator_objective,
    finetune_classifier,
    fit_classifier,
    log_softmax,
    soft_ce_grad,
    soft_ce_loss,
    train_estimator,
)

probs = hnp.arrays(float, 4, elements=st.floats(0.01, 1.0)).map(lambda v: v / v.sum())
logit_vecs = hnp.arrays(float, 4, elements=st.floats(-8, 8))


def _entropy(q):
    q = np.asarray(q)
    return float(-(q * np.log(q)).sum())


class TestSoftCe:
    def test_uniform_prediction(self):
        assert soft_ce_loss([0.0, 0.0, 0.0], [0.1438, 0.7124, 0.1438]) == pytest.approx(math.log(3), abs=1e-12)

    @given(probs, st.floats(-5, 5))
    def test_minimizer(self, q, c):
        assert soft_ce_loss(np.log(q) + c, q) == pytest.approx(_entropy(q), abs=1e-9)

    @given(probs, logit_vecs)
    def test_bounded_below_by_entropy(self, q, z):
        assert soft_ce_loss(z, q) >= _entropy(q) - 1e-9

    @given(logit_vecs, st.permutations(range(4)))
    def test_uniform_label_permutation(self, z, perm):
        q = np.full(4, 0.25)
        assert soft_ce_loss(z[list(perm)], q) == pytest.approx(soft_ce_loss(z, q), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            soft_ce_loss([0.0, 1.0], [1.0])


class TestConsistency:
    def test_hand_example(self):
        # f_bar = (0.5, 0.5); mean of KL(f_bar || p_j) in nats
        kl, ent = consistency_terms(np.log([[0.6, 0.4], [0.4, 0.6]]))
        direct = 0.5 * (0.5 * math.log(0.5 / 0.6) + 0.5 * math.log(0.5 / 0.4)) * 2
        assert kl == pytest.approx(direct, abs=1e-15)
        assert kl == pytest.approx(0.020411, abs=1e-6)
        value, _ = consistency_grad(np.log([[0.6, 0.4], [0.4, 0.6]]), 1.0, 0.0)
        assert value == pytest.approx(kl)

    def test_constant_net(self):
        net = MlpClassifier([(np.zeros((3, 2)), np.array([0.2, -1.0, 0.5]))])
        out = consistency_loss(net, [0.3, 0.1], 4, 1.0, lam=2.0, eta=0.7, stream=NoiseStream(0))
        p = np.exp(log_softmax(np.array([0.2, -1.0, 0.5])))
        assert out.consistency_kl == pytest.approx(0.0, abs=1e-15)
        assert out.total == pytest.approx(0.7 * _entropy(p), abs=1e-12)

    def test_identical_one_hot(self):
        z = np.array([[60.0, -60.0, -60.0]] * 3)
        value, _ = consistency_grad(z, 1.0, 1.0)
        assert value == pytest.approx(0.0, abs=1e-40)

    @settings(max_examples=100)
    @given(hnp.arrays(float, (3, 4), elements=st.floats(-6, 6)))
    def test_nonnegative_and_zero_iff_equal(self, z):
        kl, ent = consistency_terms(z)
        assert kl >= -1e-15 and ent >= -1e-15
        p = np.exp(log_softmax(z))
        if kl <= 1e-15:
            assert np.allclose(p, p[0], atol=1e-6)

    def test_m_validated(self):
        with pytest.raises(ValueError):
            consistency_loss(MlpClassifier.initialize([2, 3], 0), [0.0, 0.0], 0, 1.0, 1.0, 1.0, NoiseStream(0))


def _numeric_grad(f, z, eps=1e-6):
    g = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += eps
        zm[idx] -= eps
        g[idx] = (f(zp) - f(zm)) / (2 * eps)
    return g


def _rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


class TestGradients:
    def test_soft_ce_logits(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            z, q = rng.normal(size=5) * 2, rng.dirichlet(np.ones(5))
            assert _rel_err(soft_ce_grad(z, q), _numeric_grad(lambda v: soft_ce_loss(v, q), z)) <= 1e-6

    def test_consistency_logits(self):
        rng = np.random.default_rng(1)
        for m in (1, 2, 4):
            z = rng.normal(size=(m, 3)) * 2
            lam, eta = rng.uniform(0, 3, size=2)
            _, g = consistency_grad(z, lam, eta)
            num = _numeric_grad(lambda v: consistency_grad(v, lam, eta)[0], z)
            assert _rel_err(g, num) <= 1e-6

    @pytest.mark.parametrize("weak", [False, True])
    def test_network_parameters(self, weak):
        rng = np.random.default_rng(2)
        net = MlpClassifier.initialize([2, 6, 5, 3], seed=3)
        B, m = 5, 2
        x = rng.normal(size=(B, 2))
        q = rng.dirichlet(np.ones(3), size=B)
        w_e, w_r = rng.uniform(0.5, 2, B), rng.uniform(0, 1, B)
        radii = rng.uniform(0, 2, size=(B, 3))
        noise = rng.normal(size=(B, m, 2))
        _, grads = estimator_objective(net, x, q, w_e, w_r, noise, 0.5, 1.3, 0.4,
                                       radii=radii, C=2.0, weak=weak)
        for li, (w, b) in enumerate(net.layers):
            for pi, param in enumerate((w, b)):
                def f(v, li=li, pi=pi):
                    layers = [[a.copy(), c.copy()] for a, c in net.layers]
                    layers[li][pi] = v
                    other = MlpClassifier([tuple(layer) for layer in layers])
                    return estimator_objective(other, x, q, w_e, w_r, noise, 0.5, 1.3, 0.4,
                                               radii=radii, C=2.0, weak=weak, with_grad=False)[0].total
                assert _rel_err(grads[li][pi], _numeric_grad(f, param.copy())) <= 1e-4


def _separable_records(n=200, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, 2))
    X[:, 0] += np.where(X[:, 0] > 0, 0.3, -0.3)
    recs = []
    for i, x in enumerate(X):
        h = int(x[0] > 0)  # margin 0.3 on each side of the gap
        radii = [1.5, 0.0] if h == 0 else [0.0, 1.5]
        recs.append(SigmaRecord(i, x.tolist(), radii, h, soft_label(radii).tolist(), 1.0, 0.6))
    return recs


class TestTrainEstimator:
    def test_separable(self):
        recs = _separable_records()
        res = train_estimator(recs, TrainingConfig(lam=0.0, eta=0.0, sigma_e=0.05, epochs=40, hidden=(16,)))
        X = np.array([r.features for r in recs])
        acc = np.mean(res.model.classify_batch(X) == [r.hard_label for r in recs])
        assert acc >= 0.99
        assert res.final_loss <= res.initial_loss

    def test_large_lambda_flattens_noise_response(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(-1, 1, size=(300, 2))
        labels = ((X[:, 0] + 0.3 * rng.normal(size=300)) > 0).astype(int)
        recs = [SigmaRecord(i, x.tolist(), [1.0, 0.0] if h == 0 else [0.0, 1.0], int(h),
                            soft_label([1.0, 0.0] if h == 0 else [0.0, 1.0]).tolist(), 1.0, 1.0)
                for i, (x, h) in enumerate(zip(X, labels))]

        def instability(model):
            r = np.random.default_rng(5)
            out = []
            for x in X[:100]:
                p = model.classify_batch(x + 0.5 * r.standard_normal((64, 2)))
                out.append(1 - np.bincount(p, minlength=2).max() / 64)
            return np.mean(out)

        base = dict(eta=0.0, m=4, sigma_e=0.5, epochs=40, hidden=(16,))
        loose = instability(train_estimator(recs, TrainingConfig(lam=0.0, **base)).model)
        tight = instability(train_estimator(recs, TrainingConfig(lam=100.0, **base)).model)
        assert tight <= 0.01 < loose

    def test_zero_epochs(self):
        init = MlpClassifier.initialize([2, 4, 2], 7)
        res = train_estimator(_separable_records(20), TrainingConfig(epochs=0), model=init)
        assert res.model.to_dict() == init.to_dict()
        assert res.history == []

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence(self):
        recs = _separable_records(10)
        for r in recs:
            r.features = [v * 1e300 for v in r.features]
        with pytest.raises(TrainingDivergedError) as err:
            train_estimator(recs, TrainingConfig(epochs=2, hidden=(4,)))
        assert "epoch" in err.value.diagnostics

    def test_empty(self):
        with pytest.raises(ValueError):
            train_estimator([], TrainingConfig())

    def test_deterministic(self):
        recs = _separable_records(30)
        cfg = TrainingConfig(epochs=3, hidden=(8,), seed=4)
        assert train_estimator(recs, cfg).model.to_dict() == train_estimator(recs, cfg).model.to_dict()

    def test_weak_mode(self):
        recs = _separable_records(30)
        res = train_estimator(recs, TrainingConfig(epochs=2, hidden=(8,), weak_consistency=True, C=2.0))
        assert all(np.isfinite(row["total"]) for row in res.history)

    @pytest.mark.parametrize("kw", [{"m": 0}, {"lam": -1.0}, {"lr": 0.0}, {"weak_consistency": True}])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            TrainingConfig(**kw)


class TestFinetune:
    def test_constant_estimator_is_plain_augmentation(self):
        X, y = sample_mixture(60, 0)
        net = MlpClassifier.initialize([2, 8, 3], 0)
        const = ConstantClassifier(1, 2, 3)
        # an MLP that always answers index 1 is the same degenerate estimator
        flat = MlpClassifier([(np.zeros((3, 2)), np.array([0.0, 5.0, 0.0]))])
        cfg = TrainingConfig(epochs=3, lr=0.02, sigma_e=1.0)
        a = finetune_classifier(net, const, X, y, MIXTURE_SIGMAS, cfg)
        b = finetune_classifier(net, flat, X, y, MIXTURE_SIGMAS, cfg)
        assert a.model.to_dict() == b.model.to_dict()

    def test_zero_epochs(self):
        X, y = sample_mixture(20, 0)
        net = MlpClassifier.initialize([2, 8, 3], 0)
        res = finetune_classifier(net, ConstantClassifier(0, 2, 3), X, y, MIXTURE_SIGMAS, TrainingConfig(epochs=0))
        assert res.model.to_dict() == net.to_dict()

    def test_mixture_improves_dual_curve(self):
        Xtr, ytr = sample_mixture(400, 1)
        clf = fit_classifier(Xtr, ytr, 3, TrainingConfig(epochs=60, hidden=(32, 32), batch_size=32)).model
        est = train_mixture_estimator()
        ft = finetune_classifier(clf, est, Xtr, ytr, SigmaSet(MIXTURE_SIGMAS),
                                 TrainingConfig(epochs=30, lr=0.02, batch_size=32, seed=1, sigma_e=1.0))
        assert ft.final_loss < ft.initial_loss
        Xte, yte = sample_mixture(100, 2)
        cfg = DualConfig(SigmaSet(MIXTURE_SIGMAS), n_sigma=2000, n_cls=2000)
        grid = radius_grid()

        def curve(model):
            outs = [dual_certify(est, model, x, cfg, NoiseStream(5).for_input(i)) for i, x in enumerate(Xte)]
            return certified_accuracy([o.y_hat == t for o, t in zip(outs, yte)], [o.R_final for o in outs], grid)

        assert np.mean(curve(ft.model) >= curve(clf)) >= 0.7


class TestSchedule:
    def _run(self, rounds, out_dir=None):
        X, y = sample_mixture(30, 0)
        clf = fit_classifier(X, y, 3, TrainingConfig(epochs=5, hidden=(8,))).model
        return alternating_schedule(rounds, clf, X, y, MIXTURE_SIGMAS, BuilderOptions(n0=20, n=100),
                                    TrainingConfig(epochs=2, hidden=(8,)),
                                    TrainingConfig(epochs=2, sigma_e=1.0), NoiseStream(0), out_dir)

    def test_one_round(self, tmp_path):
        arts = self._run(1, tmp_path)
        assert [a.kind for a in arts] == ["estimator", "classifier"]
        for a in arts:
            assert load_model(a.path).to_dict() == a.model.to_dict()
            assert (tmp_path / f"stage{a.stage}_{a.kind}_metrics.csv").exists()

    def test_two_rounds_retrains_estimator(self):
        assert [a.kind for a in self._run(2)] == ["estimator", "classifier", "estimator"]

    def test_zero_rounds(self):
        with pytest.raises(ValueError):
            self._run(0)
