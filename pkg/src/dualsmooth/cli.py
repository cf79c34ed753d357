"""``dualsmooth`` command line.

Every verb reads one JSON config (``--config``), writes into ``--out`` and
copies the config there verbatim next to a resolved ``run.json``. Outputs
carry no timestamps, so equal configs and seeds give byte-identical files
whatever the worker count.

Exit codes: 0 ok, 2 bad config, 3 model problem, 4 runtime failure. Failures
print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .benchmarks import sample_mixture
from .classifiers import (
    BaseClassifier,
    ClassifierError,
    DimensionMismatchError,
    MlpClassifier,
    load_model,
    save_model,
)
from .dual import BudgetSplit, DualConfig, SigmaSet, budget_table, dual_certify
from .noise import NoiseStream
from .report import (
    certified_accuracy,
    per_sigma_radii,
    radius_grid,
    read_report_csv,
    row_from_outcome,
    write_curve_csv,
    write_ecdf_csv,
    write_report_csv,
)
from .routing import ExpertPool, MissingExpertError, load_pool
from .sigma_dataset import BuilderOptions, build_sigma_dataset, read_jsonl, write_jsonl, write_summary_csv
from .training import (
    TrainingDivergedError,
    config_from_dict,
    config_to_dict,
    finetune_classifier,
    train_estimator,
    write_metrics_csv,
)

log = logging.getLogger("dualsmooth")

EXIT_OK, EXIT_CONFIG, EXIT_MODEL, EXIT_RUNTIME = 0, 2, 3, 4

BETA_DEFAULTS = {
    "N": 100_000,
    "sigma": 1.0,
    "alpha_total": 0.001,
    "success_fractions": [0.99, 0.8, 0.6],
    "splits": [[1, 0], [1, 1], [1, 4]],
}


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _config_error(msg):
    return CliError(EXIT_CONFIG, "config", msg)


class Run:
    """Parsed flags plus the loaded config document."""

    def __init__(self, args):
        self.args = args
        self.raw = b""
        self.config: dict = {}
        self.base = Path.cwd()
        if args.config:
            path = Path(args.config)
            try:
                self.raw = path.read_bytes()
                self.config = json.loads(self.raw.decode("utf-8"))
            except OSError as exc:
                raise _config_error(f"cannot read config: {exc}") from None
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise _config_error(f"config is not valid JSON: {exc}") from None
            if not isinstance(self.config, dict):
                raise _config_error("config must be a JSON object")
            self.base = path.resolve().parent
        self.out = Path(args.out)
        self.seed = self._seed()
        self.workers = args.workers if args.workers is not None else int(self.config.get("workers", 1))
        if self.workers < 1:
            raise _config_error("--workers must be >= 1")

    def _seed(self) -> int:
        if self.args.seed is not None:
            return self.args.seed
        if "seed" in self.config:
            return self._int(self.config["seed"], "seed")
        env = os.environ.get("DUALSMOOTH_SEED")
        if env is not None:
            return self._int(env, "DUALSMOOTH_SEED")
        return 0

    @staticmethod
    def _int(value, name):
        try:
            out = int(value)
        except (TypeError, ValueError):
            raise _config_error(f"{name} must be an integer") from None
        if out < 0:
            raise _config_error(f"{name} must be nonnegative")
        return out

    def get(self, key, default=None, required=False):
        if key not in self.config:
            if required:
                raise _config_error(f"missing config key '{key}'")
            return default
        return self.config[key]

    def path(self, key, required=True):
        value = self.get(key, required=required)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base / p

    def model(self, key) -> BaseClassifier:
        p = self.path(key)
        try:
            return load_model(p)
        except FileNotFoundError:
            raise CliError(EXIT_MODEL, "model", f"model file not found: {p}") from None
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise CliError(EXIT_MODEL, "model", f"cannot load model {p}: {exc}") from None

    def begin(self, resolved: dict):
        self.out.mkdir(parents=True, exist_ok=True)
        if self.args.config:
            (self.out / "config.json").write_bytes(self.raw)
        doc = {"command": self.args.command, "seed": self.seed, **resolved}
        _write_json(self.out / "run.json", doc)


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sigma_set(run: Run) -> SigmaSet:
    try:
        return SigmaSet(run.get("sigma_set", required=True))
    except (TypeError, ValueError) as exc:
        raise _config_error(f"bad sigma_set: {exc}") from None


def _inputs(run: Run, key="inputs"):
    """``(X, y, ids)`` from ``{"csv": path}`` or ``{"generator": "mixture2d", ...}``.

    CSV files have a header; a ``label`` column is optional, an ``id`` column
    sets input ids, every other column is a feature.
    """
    spec = run.get(key, required=True)
    if not isinstance(spec, dict):
        raise _config_error(f"'{key}' must be an object")
    if "generator" in spec:
        if spec["generator"] != "mixture2d":
            raise _config_error(f"unknown input generator {spec['generator']!r}")
        n = int(spec.get("n", 200))
        X, y = sample_mixture(n, int(spec.get("seed", 0)), float(spec.get("right_fraction", 0.5)))
        return X, y, list(range(n))
    if "csv" not in spec:
        raise _config_error(f"'{key}' needs 'csv' or 'generator'")
    p = Path(spec["csv"])
    p = p if p.is_absolute() else run.base / p
    try:
        with open(p, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise _config_error(f"cannot read inputs: {exc}") from None
    if not rows:
        raise _config_error("input CSV is empty")
    cols = [c for c in rows[0] if c not in ("label", "id")]
    try:
        X = np.array([[float(r[c]) for c in cols] for r in rows])
        y = np.array([int(r["label"]) for r in rows]) if "label" in rows[0] else None
        ids = [int(r["id"]) for r in rows] if "id" in rows[0] else list(range(len(rows)))
    except (TypeError, ValueError) as exc:
        raise _config_error(f"bad input CSV: {exc}") from None
    return X, y, ids


def _dual_config(run: Run, sigma_set: SigmaSet) -> DualConfig:
    try:
        total = float(run.get("alpha_total", 0.001))
        if "budget_ratio" in run.config:
            cls_part, sigma_part = run.config["budget_ratio"]
            split = BudgetSplit.from_ratio(total, float(cls_part), float(sigma_part))
        else:
            split = BudgetSplit(total, float(run.get("alpha_sigma", total / 2)),
                                float(run.get("alpha_cls", total / 2)))
        return DualConfig(sigma_set, run.get("sigma_e"), int(run.get("n0_sigma", 100)),
                          int(run.get("n_sigma", 10_000)), int(run.get("n0_cls", 100)),
                          int(run.get("n_cls", 10_000)), split)
    except (TypeError, ValueError) as exc:
        raise _config_error(f"bad certification settings: {exc}") from None


def _map(run: Run, fn, items):
    if run.workers > 1:
        with ThreadPoolExecutor(max_workers=run.workers) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _builder_options(run: Run) -> BuilderOptions:
    keys = ("n0", "n", "alpha", "approximate", "subset_fraction", "subset_seed",
            "filter_uncertifiable", "weak_consistency", "C")
    try:
        return BuilderOptions(**{k: run.config[k] for k in keys if k in run.config})
    except (TypeError, ValueError) as exc:
        raise _config_error(f"bad dataset options: {exc}") from None


def cmd_build_dataset(run: Run) -> dict:
    sigma_set = _sigma_set(run)
    options = _builder_options(run)
    if "pool" in run.config:
        source = _load_pool(run)
    else:
        source = run.model("classifier")
    X, y, ids = _inputs(run)
    run.begin({"sigma_set": list(sigma_set), "options": options.__dict__})
    built = build_sigma_dataset(source, X, sigma_set, options, NoiseStream(run.seed).child("dataset"),
                                labels=y, ids=ids, workers=run.workers)
    write_jsonl(built.records, run.out / "dataset.jsonl")
    write_summary_csv(built.records, sigma_set, run.out / "summary.csv")
    _write_json(run.out / "manifest.json", built.manifest())
    return {"records": len(built.records), "failed": len(built.failed), "dropped": len(built.dropped)}


def _training_config(run: Run, **defaults):
    doc = dict(defaults)
    doc.update(run.get("training", {}))
    doc.setdefault("seed", run.seed)
    try:
        return config_from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise _config_error(f"bad training settings: {exc}") from None


def cmd_train_estimator(run: Run) -> dict:
    dataset = run.path("dataset")
    try:
        records = read_jsonl(dataset)
    except OSError as exc:
        raise _config_error(f"cannot read dataset: {exc}") from None
    if not records:
        raise _config_error("dataset is empty")
    config = _training_config(run)
    init = run.model("init_model") if "init_model" in run.config else None
    run.begin({"training": config_to_dict(config)})
    result = train_estimator(records, config, init)
    save_model(result.model, run.out / "estimator.json")
    write_metrics_csv(result.history, run.out / "metrics.csv")
    return {"initial_loss": result.initial_loss, "final_loss": result.final_loss}


def cmd_finetune_classifier(run: Run) -> dict:
    sigma_set = _sigma_set(run)
    classifier = run.model("classifier")
    if not isinstance(classifier, MlpClassifier):
        raise CliError(EXIT_MODEL, "model", "finetuning needs an MLP classifier")
    estimator = run.model("estimator")
    X, y, _ = _inputs(run)
    if y is None:
        raise _config_error("finetuning needs labelled inputs")
    config = _training_config(run, sigma_e=sigma_set.max)
    run.begin({"sigma_set": list(sigma_set), "training": config_to_dict(config)})
    result = finetune_classifier(classifier, estimator, X, y, sigma_set, config)
    save_model(result.model, run.out / "classifier.json")
    write_metrics_csv(result.history, run.out / "metrics.csv")
    return {"initial_loss": result.initial_loss, "final_loss": result.final_loss}


def _load_pool(run: Run) -> ExpertPool:
    p = run.path("pool")
    try:
        return load_pool(p)
    except FileNotFoundError as exc:
        raise CliError(EXIT_MODEL, "model", f"model file not found: {exc.filename or p}") from None
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError(EXIT_MODEL, "model", f"cannot load expert pool {p}: {exc}") from None


def _certify_inputs(run: Run, estimator, classifier_for, sigma_set, pool=None) -> dict:
    config = _dual_config(run, sigma_set)
    if estimator.num_classes != len(sigma_set):
        raise CliError(EXIT_MODEL, "model",
                       f"estimator has {estimator.num_classes} outputs for {len(sigma_set)} noise levels")
    if pool is not None:
        try:
            pool.check_matches(config)
        except (MissingExpertError, ValueError) as exc:
            raise CliError(EXIT_MODEL, "model", str(exc).strip("'\"")) from None
    X, y, ids = _inputs(run)
    if y is None:
        raise _config_error("certification needs labelled inputs")
    shared = bool(run.get("shared_noise", False))
    delta = bool(run.get("delta_metrics", True))
    grid = radius_grid(float(run.get("radius_max", 2.5)), float(run.get("radius_step", 0.25)))
    run.begin({"sigma_set": list(sigma_set), "sigma_e": config.sigma_e,
               "alpha": [config.split.alpha_total, config.split.alpha_sigma, config.split.alpha_cls],
               "plans": [config.n0_sigma, config.n_sigma, config.n0_cls, config.n_cls],
               "shared_noise": shared, "inputs": len(X)})
    root = NoiseStream(run.seed)

    def one(i):
        stream = root.for_input(ids[i])
        out = dual_certify(estimator, classifier_for, X[i], config, stream, shared_noise=shared)
        star = None
        if delta:
            cls_stream = stream if shared else stream.child("cls")
            star = per_sigma_radii(classifier_for, X[i], int(y[i]), config, cls_stream)
        return row_from_outcome(ids[i], int(y[i]), out, star)

    rows = _map(run, one, range(len(X)))
    write_report_csv(rows, run.out / "report.csv")
    acc = certified_accuracy([r.correct for r in rows], [r.R_final for r in rows], grid)
    write_curve_csv(grid, acc, run.out / "curve.csv")
    return {"inputs": len(rows), "certified_accuracy_at_0": float(acc[0])}


def cmd_certify(run: Run) -> dict:
    sigma_set = _sigma_set(run)
    estimator = run.model("estimator")
    classifier = run.model("classifier")
    return _certify_inputs(run, estimator, classifier, sigma_set)


def cmd_route(run: Run) -> dict:
    sigma_set = _sigma_set(run)
    estimator = run.model("estimator")
    pool = _load_pool(run)
    return _certify_inputs(run, estimator, pool.expert_for, sigma_set, pool)


def cmd_beta_table(run: Run) -> dict:
    cfg = {**BETA_DEFAULTS, **{k: run.config[k] for k in BETA_DEFAULTS if k in run.config}}
    try:
        rows = budget_table(int(cfg["N"]), float(cfg["sigma"]), cfg["success_fractions"],
                            [tuple(s) for s in cfg["splits"]], float(cfg["alpha_total"]))
    except (TypeError, ValueError) as exc:
        raise _config_error(f"bad beta-table settings: {exc}") from None
    run.begin(cfg)
    with open(run.out / "beta_table.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["success_fraction", "split", "alpha_cls", "p_lower", "radius"])
        for r in rows:
            w.writerow([repr(r.success_fraction), f"{r.cls_part:g}:{r.sigma_part:g}",
                        repr(r.alpha_cls), repr(r.p_lower), f"{r.radius:.4f}"])
    return {"rows": len(rows), "radii": [round(r.radius, 4) for r in rows]}


def cmd_report(run: Run) -> dict:
    reports = run.get("reports")
    if reports is None:
        reports = [run.config["report"]] if "report" in run.config else []
    paths = [p if Path(p).is_absolute() else run.base / p for p in reports]
    paths += [Path(p) for p in run.args.reports]
    if not paths:
        raise _config_error("no report files given")
    rows = []
    for p in paths:
        try:
            rows.extend(read_report_csv(p))
        except OSError as exc:
            raise _config_error(f"cannot read report: {exc}") from None
        except (KeyError, ValueError, TypeError) as exc:
            raise _config_error(f"malformed report {p}: {exc}") from None
    grid = radius_grid(float(run.get("radius_max", 2.5)), float(run.get("radius_step", 0.25)))
    run.begin({"reports": [str(p) for p in reports]})
    acc = certified_accuracy([r.correct for r in rows], [r.R_final for r in rows], grid)
    write_curve_csv(grid, acc, run.out / "curve.csv")
    write_ecdf_csv([r.delta_R_c for r in rows], run.out / "ecdf_delta_R_c.csv", "delta_R_c")
    write_ecdf_csv([r.delta_R_sigma for r in rows], run.out / "ecdf_delta_R_sigma.csv", "delta_R_sigma")
    return {"inputs": len(rows)}


COMMANDS = {
    "build-dataset": cmd_build_dataset,
    "train-estimator": cmd_train_estimator,
    "finetune-classifier": cmd_finetune_classifier,
    "certify": cmd_certify,
    "route": cmd_route,
    "beta-table": cmd_beta_table,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualsmooth", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--out", default="out", help="output directory (default: out)")
        if name == "report":
            p.add_argument("reports", nargs="*", help="extra report.csv files")
        else:
            p.set_defaults(reports=[])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command != "beta-table" and args.command != "report" and not args.config:
            raise _config_error("--config is required")
        run = Run(args)
        summary = COMMANDS[args.command](run)
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc))
    except (MissingExpertError, DimensionMismatchError) as exc:
        return _fail(EXIT_MODEL, "model", str(exc))
    except (ClassifierError, TrainingDivergedError) as exc:
        return _fail(EXIT_RUNTIME, "runtime", str(exc))
    except Exception as exc:  # noqa: BLE001 - last-resort boundary
        log.debug("unexpected failure", exc_info=True)
        return _fail(EXIT_RUNTIME, "runtime", f"{type(exc).__name__}: {exc}")
    print(json.dumps({"status": "ok", "command": args.command, **summary}, sort_keys=True))
    return EXIT_OK


def _fail(code, kind, message) -> int:
    sys.stderr.write(json.dumps({"error": kind, "exit_code": code, "message": message}) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
