"""Desk-scale training for the variance estimator and the classifier.

The estimator objective, per input x with noisy copies x + d_1..x + d_m, is

    w_e(x) * (softCE(x) + w_r(x) * (lam * mean_j KL(f_bar || f_j) + eta * H(f_bar)))

where f_j is the softmax on copy j, f_bar their average, and softCE the
soft-label cross-entropy averaged over the copies. Gradients are written out
by hand and backpropagated through a rectifier MLP; the optimiser is plain
momentum SGD with a step-decay schedule.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .classifiers import BaseClassifier, MlpClassifier, save_model
from .dual import SigmaSet
from .noise import NoiseStream
from .sigma_dataset import BuilderOptions, build_sigma_dataset, consistency_weight, write_jsonl

log = logging.getLogger(__name__)

__all__ = [
    "TrainingDivergedError",
    "TrainingConfig",
    "LossBreakdown",
    "TrainResult",
    "log_softmax",
    "soft_ce_loss",
    "soft_ce_grad",
    "consistency_terms",
    "consistency_grad",
    "consistency_loss",
    "estimator_objective",
    "train_estimator",
    "finetune_classifier",
    "fit_classifier",
    "alternating_schedule",
    "write_metrics_csv",
]


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class TrainingConfig:
    lam: float = 1.0
    eta: float = 0.5
    m: int = 2
    sigma_e: float = 1.0
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    decay_every: int | None = None
    seed: int = 0
    hidden: tuple = (32, 32)
    weak_consistency: bool = False
    C: float | None = None

    def __post_init__(self):
        if self.lam < 0 or self.eta < 0:
            raise ValueError("lam and eta must be nonnegative")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr > 0 or not self.sigma_e > 0:
            raise ValueError("lr and sigma_e must be positive")
        if self.weak_consistency and not (self.C and self.C > 0):
            raise ValueError("weak consistency needs a positive C")


@dataclass(frozen=True)
class LossBreakdown:
    """Batch means of the unweighted terms plus the weighted total.

    The per-sample arrays let callers re-derive ``total``.
    """

    soft_ce: float
    consistency_kl: float
    entropy_term: float
    total: float
    per_sample: dict = field(default_factory=dict, repr=False, compare=False)


@dataclass
class TrainResult:
    model: MlpClassifier
    history: list
    initial_loss: float
    final_loss: float


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    top = z.max(axis=-1, keepdims=True)
    return z - top - np.log(np.exp(z - top).sum(axis=-1, keepdims=True))


def soft_ce_loss(logits, soft_label) -> float:
    """-sum_i q_i log softmax(logits)_i."""
    logits = np.asarray(logits, dtype=float)
    q = np.asarray(soft_label, dtype=float)
    if logits.shape != q.shape:
        raise ValueError("logits and soft label must have the same shape")
    # rows of a batch are averaged
    return float(-(q * log_softmax(logits)).sum(axis=-1).mean())


def soft_ce_grad(logits, soft_label) -> np.ndarray:
    """Gradient of :func:`soft_ce_loss` for a single logit vector."""
    logits = np.asarray(logits, dtype=float)
    q = np.asarray(soft_label, dtype=float)
    return np.exp(log_softmax(logits)) * q.sum() - q


def _mean_distribution(logp: np.ndarray) -> np.ndarray:
    # log of the average softmax over the copy axis (-2)
    top = logp.max(axis=-2, keepdims=True)
    m = logp.shape[-2]
    return (top + np.log(np.exp(logp - top).sum(axis=-2, keepdims=True)))[..., 0, :] - math.log(m)


def consistency_terms(noisy_logits) -> tuple:
    """``(mean_j KL(f_bar || f_j), H(f_bar))`` for logits shaped ``(..., m, K)``."""
    logp = log_softmax(noisy_logits)
    log_fbar = _mean_distribution(logp)
    fbar = np.exp(log_fbar)
    kl = (fbar[..., None, :] * (log_fbar[..., None, :] - logp)).sum(axis=-1).mean(axis=-1)
    ent = -(fbar * log_fbar).sum(axis=-1)
    return kl, ent


def consistency_grad(noisy_logits, lam: float, eta: float) -> tuple:
    """Value and gradient of ``lam * KL + eta * H`` with respect to the
    ``(m, K)`` noisy logits (batched over leading axes)."""
    z = np.asarray(noisy_logits, dtype=float)
    m = z.shape[-2]
    logp = log_softmax(z)
    p = np.exp(logp)
    log_fbar = _mean_distribution(logp)
    fbar = np.exp(log_fbar)
    mean_logp = logp.mean(axis=-2)
    kl = (fbar[..., None, :] * (log_fbar[..., None, :] - logp)).sum(axis=-1).mean(axis=-1)
    ent = -(fbar * log_fbar).sum(axis=-1)
    g = lam * (log_fbar + 1.0 - mean_logp) - eta * (log_fbar + 1.0)
    gm = (g / m)[..., None, :]
    through_fbar = p * (gm - (gm * p).sum(axis=-1, keepdims=True))
    through_logp = (lam / m) * (p - fbar[..., None, :])
    return lam * kl + eta * ent, through_fbar + through_logp


def consistency_loss(net: MlpClassifier, x, m: int, sigma_e: float, lam: float, eta: float,
                     stream: NoiseStream) -> LossBreakdown:
    """Consistency penalty of ``net`` at ``x`` over ``m`` noisy copies."""
    if m < 1:
        raise ValueError("m must be >= 1")
    x = np.asarray(x, dtype=float).reshape(-1)
    noise = stream.standard_normal(0, m, x.size)
    logits = net.logits(x[None, :] + sigma_e * noise)
    kl, ent = consistency_terms(logits)
    return LossBreakdown(0.0, float(kl), float(ent), float(lam * kl + eta * ent))


class _Params:
    """Mutable copy of MLP weights with a cached forward/backward pass."""

    def __init__(self, model: MlpClassifier):
        self.layers = [[w.copy(), b.copy()] for w, b in model.layers]

    def forward(self, x):
        acts = [x]
        h = x
        for i, (w, b) in enumerate(self.layers):
            h = h @ w.T + b
            if i < len(self.layers) - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def backward(self, acts, dout):
        grads = [None] * len(self.layers)
        d = dout
        for i in range(len(self.layers) - 1, -1, -1):
            w, _ = self.layers[i]
            grads[i] = [d.T @ acts[i], d.sum(axis=0)]
            if i > 0:
                d = (d @ w) * (acts[i] > 0)
        return grads

    def to_model(self) -> MlpClassifier:
        return MlpClassifier([(w.copy(), b.copy()) for w, b in self.layers])


def estimator_objective(model_or_params, x, soft_labels, w_e, w_r, noise, sigma_e, lam, eta,
                        radii=None, C=None, weak=False, with_grad=True):
    """Weighted estimator loss on a batch.

    ``noise`` is standard normal with shape ``(B, m, d)``. In weak mode the
    consistency weight uses the radius at the smallest level predicted on the
    noisy copies (treated as a constant). Returns ``(LossBreakdown, grads)``.
    """
    params = model_or_params if isinstance(model_or_params, _Params) else _Params(model_or_params)
    x = np.asarray(x, dtype=float)
    B, m, d = noise.shape
    q = np.asarray(soft_labels, dtype=float)
    w_e = np.asarray(w_e, dtype=float)
    noisy = (x[:, None, :] + sigma_e * noise).reshape(B * m, d)
    logits_flat, acts = params.forward(noisy)
    K = logits_flat.shape[1]
    logits = logits_flat.reshape(B, m, K)
    if weak:
        smallest = logits.argmax(axis=-1).min(axis=-1)
        w_r = np.array([consistency_weight(radii[i], C, True, smallest[i]) for i in range(B)])
    w_r = np.asarray(w_r, dtype=float)

    logp = log_softmax(logits)
    ce = -(q[:, None, :] * logp).sum(axis=-1).mean(axis=-1)
    con, dcon = consistency_grad(logits, lam, eta)
    kl, ent = consistency_terms(logits)
    per = w_e * (ce + w_r * con)
    total = float(per.sum() / B)
    breakdown = LossBreakdown(
        float(ce.mean()), float(kl.mean()), float(ent.mean()), total,
        per_sample={"soft_ce": ce, "kl": kl, "entropy": ent, "w_e": w_e, "w_r": w_r,
                    "lam": lam, "eta": eta},
    )
    if not with_grad:
        return breakdown, None
    dce = (np.exp(logp) - q[:, None, :]) / m
    dlogits = (w_e / B)[:, None, None] * (dce + w_r[:, None, None] * dcon)
    grads = params.backward(acts, dlogits.reshape(B * m, K))
    return breakdown, grads


def _ce_objective(params: _Params, x, y, with_grad=True):
    logits, acts = params.forward(x)
    logp = log_softmax(logits)
    B = len(x)
    loss = float(-logp[np.arange(B), y].mean())
    if not with_grad:
        return loss, None
    d = np.exp(logp)
    d[np.arange(B), y] -= 1.0
    return loss, params.backward(acts, d / B)


def _sgd_loop(params: _Params, n_items: int, config: TrainingConfig, batch_loss, eval_loss):
    """Shared momentum-SGD loop; ``batch_loss(idx, rng)`` returns
    ``(LossBreakdown-like dict, grads)``."""
    rng = np.random.default_rng(config.seed)
    velocity = [[np.zeros_like(w), np.zeros_like(b)] for w, b in params.layers]
    decay_every = config.decay_every or max(1, config.epochs // 3)
    history = []
    initial = eval_loss(params)
    step = 0
    for epoch in range(config.epochs):
        lr = config.lr * 0.5 ** (epoch // decay_every)
        order = rng.permutation(n_items)
        for start in range(0, n_items, config.batch_size):
            idx = order[start:start + config.batch_size]
            row, grads = batch_loss(idx, rng)
            if not math.isfinite(row["total"]) or any(
                    not np.all(np.isfinite(g)) for pair in grads for g in pair):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {step}",
                    {"epoch": epoch, "step": step, "last": history[-5:], "row": row},
                )
            for (w, b), (vw, vb), (gw, gb) in zip(params.layers, velocity, grads):
                vw *= config.momentum
                vw -= lr * gw
                vb *= config.momentum
                vb -= lr * gb
                w += vw
                b += vb
            history.append({"step": step, "epoch": epoch, "lr": lr, **row})
            step += 1
        log.debug("epoch %d loss %.6f", epoch, history[-1]["total"] if history else float("nan"))
    final = eval_loss(params)
    return history, initial, final


def train_estimator(records, config: TrainingConfig, model: MlpClassifier | None = None,
                    on_batch=None) -> TrainResult:
    """Fit a variance estimator on sigma-dataset records.

    Starts from ``model`` if given, otherwise from a freshly initialised
    network with ``config.hidden`` layers. ``on_batch`` receives the
    :class:`LossBreakdown` of every optimisation step.
    """
    if not records:
        raise ValueError("the training set is empty")
    X = np.array([r.features for r in records], dtype=float)
    Q = np.array([r.soft_label for r in records], dtype=float)
    W_E = np.array([r.w_e for r in records], dtype=float)
    W_R = np.array([r.w_r for r in records], dtype=float)
    R = np.array([r.radii for r in records], dtype=float)
    if model is None:
        sizes = [X.shape[1], *config.hidden, Q.shape[1]]
        model = MlpClassifier.initialize(sizes, config.seed)
    params = _Params(model)
    eval_noise = np.random.default_rng([config.seed, 1]).standard_normal((len(X), config.m, X.shape[1]))

    def objective(p, idx, noise, with_grad=True):
        return estimator_objective(p, X[idx], Q[idx], W_E[idx], W_R[idx], noise, config.sigma_e,
                                   config.lam, config.eta, radii=R[idx], C=config.C,
                                   weak=config.weak_consistency, with_grad=with_grad)

    def batch_loss(idx, rng):
        noise = rng.standard_normal((len(idx), config.m, X.shape[1]))
        br, grads = objective(params, idx, noise)
        if on_batch is not None:
            on_batch(br)
        return {"soft_ce": br.soft_ce, "consistency_kl": br.consistency_kl,
                "entropy_term": br.entropy_term, "total": br.total}, grads

    def eval_loss(p):
        return objective(p, np.arange(len(X)), eval_noise, with_grad=False)[0].total

    history, initial, final = _sgd_loop(params, len(X), config, batch_loss, eval_loss)
    return TrainResult(params.to_model(), history, initial, final)


def _query_sigmas(estimator: BaseClassifier, X, sigma_values, sigma_e, rng):
    # one noisy estimator query per input: cheap stand-in for full Predict
    idx = estimator.classify_batch(X + sigma_e * rng.standard_normal(X.shape))
    return np.asarray(sigma_values, dtype=float)[idx]


def finetune_classifier(classifier: MlpClassifier, estimator: BaseClassifier, X, y, sigma_set,
                        config: TrainingConfig) -> TrainResult:
    """Cross-entropy finetuning on inputs perturbed at the level the frozen
    estimator picks for each of them (denoising is the identity here)."""
    sigma_values = tuple(sigma_set)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    params = _Params(classifier)
    eval_rng = np.random.default_rng([config.seed, 2])
    eval_sig = _query_sigmas(estimator, X, sigma_values, config.sigma_e, eval_rng)
    eval_x = X + eval_sig[:, None] * eval_rng.standard_normal(X.shape)

    def batch_loss(idx, rng):
        xb = X[idx]
        sig = _query_sigmas(estimator, xb, sigma_values, config.sigma_e, rng)
        noisy = xb + sig[:, None] * rng.standard_normal(xb.shape)
        loss, grads = _ce_objective(params, noisy, y[idx])
        return {"cross_entropy": loss, "total": loss}, grads

    def eval_loss(p):
        return _ce_objective(p, eval_x, y, with_grad=False)[0]

    history, initial, final = _sgd_loop(params, len(X), config, batch_loss, eval_loss)
    return TrainResult(params.to_model(), history, initial, final)


def fit_classifier(X, y, num_classes: int, config: TrainingConfig, noise_sigma: float = 0.0) -> TrainResult:
    """Train a fresh classifier with plain (optionally Gaussian-augmented) cross-entropy."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    params = _Params(MlpClassifier.initialize([X.shape[1], *config.hidden, num_classes], config.seed))

    def batch_loss(idx, rng):
        xb = X[idx]
        if noise_sigma > 0:
            xb = xb + noise_sigma * rng.standard_normal(xb.shape)
        loss, grads = _ce_objective(params, xb, y[idx])
        return {"cross_entropy": loss, "total": loss}, grads

    history, initial, final = _sgd_loop(
        params, len(X), config, batch_loss, lambda p: _ce_objective(p, X, y, with_grad=False)[0])
    return TrainResult(params.to_model(), history, initial, final)


@dataclass
class Artifact:
    stage: int
    kind: str
    model: MlpClassifier
    history: list
    initial_loss: float
    final_loss: float
    path: str | None = None


def alternating_schedule(rounds: int, classifier: MlpClassifier, X, y, sigma_set,
                         builder: BuilderOptions, estimator_config: TrainingConfig,
                         finetune_config: TrainingConfig, stream: NoiseStream,
                         out_dir=None) -> list[Artifact]:
    """Alternate estimator training and classifier finetuning.

    One round trains the estimator on a dataset built with the current
    classifier and then finetunes the classifier; every further round
    rebuilds the dataset with the finetuned classifier and retrains the
    estimator, finetuning again in between rounds. The last stage is always an
    estimator when ``rounds >= 2``.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    sigma_set = sigma_set if isinstance(sigma_set, SigmaSet) else SigmaSet(sigma_set)
    stages = ["estimator", "classifier"] if rounds == 1 else (
        ["estimator", "classifier"] * (rounds - 1) + ["estimator"])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    current_cls = classifier
    estimator = None
    for i, kind in enumerate(stages):
        if kind == "estimator":
            built = build_sigma_dataset(current_cls, X, sigma_set, builder,
                                        stream.child("build", i), labels=y)
            result = train_estimator(built.records, replace(estimator_config, seed=estimator_config.seed + i))
            estimator = result.model
            if out is not None:
                write_jsonl(built.records, out / f"stage{i}_dataset.jsonl")
        else:
            result = finetune_classifier(current_cls, estimator, X, y, sigma_set,
                                         replace(finetune_config, seed=finetune_config.seed + i))
            current_cls = result.model
        art = Artifact(i, kind, result.model, result.history, result.initial_loss, result.final_loss)
        if out is not None:
            art.path = str(out / f"stage{i}_{kind}.json")
            save_model(result.model, art.path)
            write_metrics_csv(result.history, out / f"stage{i}_{kind}_metrics.csv")
        artifacts.append(art)
    return artifacts


def write_metrics_csv(history, path) -> None:
    keys = []
    for row in history:
        for k in row:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys or ["step"], lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def config_from_dict(d: dict) -> TrainingConfig:
    d = dict(d)
    if "hidden" in d:
        d["hidden"] = tuple(d["hidden"])
    if "lambda" in d:
        d["lam"] = d.pop("lambda")
    return TrainingConfig(**d)


def config_to_dict(c: TrainingConfig) -> dict:
    d = asdict(c)
    d["hidden"] = list(c.hidden)
    return d

