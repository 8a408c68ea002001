"""Experiment-config schema, deterministic experiment assembly, and atomic
JSON/CSV result emission."""

import csv
import json
import os
import tempfile
from datetime import datetime, timezone

import numpy as np
from jsonschema import Draft202012Validator

from .estimators import AffineEstimator, BackprojectionMlp
from .harness import ArraySource, TrainConfig, config_hash, train
from .losses import (
    loss_gsure,
    loss_mc,
    loss_r2r,
    loss_split_cv,
    loss_sup,
    loss_sure,
)
from .masks import BernoulliSplitMask
from .noise import GammaNoise, GaussianNoise, PoissonNoise
from .operators import DiagonalMask
from .priors import AtomPrior, GmmPrior
from .rng import RngStream

__all__ = [
    "ConfigError",
    "CONFIG_SCHEMA",
    "load_config",
    "validate_config",
    "build_experiment",
    "run_experiment",
    "write_json_atomic",
    "write_csv_atomic",
    "report_hash",
    "merge_reports",
]


class ConfigError(ValueError):
    """Schema or semantic violation; message carries the field path."""


_number = {"type": "number"}
_matrix = {"type": "array", "items": {"type": "array", "items": _number}}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["seed", "prior", "noise", "estimator", "loss", "data", "train"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "out_dir": {"type": "string"},
        "prior": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["gmm", "atoms"]},
                "means": _matrix,
                "covs": {
                    "anyOf": [
                        _number,
                        {"type": "array", "items": _number},
                        {"type": "array", "items": _matrix},
                    ]
                },
                "weights": {"type": "array", "items": _number},
                "atoms": _matrix,
            },
        },
        "noise": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["gaussian", "poisson", "gamma"]},
                "sigma": {"type": "number", "minimum": 0},
                "gain": {"type": "number", "exclusiveMinimum": 0},
                "shape_l": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "operator": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["identity", "mask"]},
                "mask": {"type": "array", "items": {"enum": [0, 1]}},
            },
        },
        "estimator": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["affine", "mlp"]},
                "constraint": {"enum": ["none", "zero_diagonal"]},
                "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}},
            },
        },
        "loss": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {
                    "enum": ["sup", "n2n", "sure", "r2r", "gsure", "split_cv", "mc"]
                },
                "alpha": {"type": "number"},
                "metric": {"enum": ["l2", "nll"]},
                "backend": {"enum": ["analytic", "hutchinson", "ramani"]},
                "split_q": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "required": ["n_items"],
            "properties": {
                "n_items": {"type": "integer", "minimum": 4},
                "n_test": {"type": "integer", "minimum": 0},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "optimizer": {"enum": ["adam", "sgd"]},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "epochs": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "early_stop_patience": {"type": "integer", "minimum": 1},
                "val_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "select": {"enum": ["best_val", "final"]},
            },
        },
    },
}


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})")
    validate_config(cfg)
    return cfg


def _field_path(error) -> str:
    return ".".join(str(p) for p in error.absolute_path) or "(root)"


def validate_config(cfg: dict):
    validator = Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"{_field_path(e)}: {e.message}")
    # semantic checks the schema cannot express
    loss = cfg["loss"]
    if loss["kind"] == "r2r":
        alpha = loss.get("alpha", 0.1)
        if not (0.0 < alpha < 1.0):
            raise ConfigError("loss.alpha: alpha out of (0,1)")
    prior = cfg["prior"]
    if prior["kind"] == "gmm":
        for key in ("means", "covs"):
            if key not in prior:
                raise ConfigError(f"prior.{key}: required for kind 'gmm'")
    if prior["kind"] == "atoms" and "atoms" not in prior:
        raise ConfigError("prior.atoms: required for kind 'atoms'")
    noise = cfg["noise"]
    needed = {"gaussian": "sigma", "poisson": "gain", "gamma": "shape_l"}[noise["kind"]]
    if needed not in noise:
        raise ConfigError(f"noise.{needed}: required for kind '{noise['kind']}'")


def _build_prior(spec: dict):
    if spec["kind"] == "gmm":
        return GmmPrior(spec["means"], spec["covs"], weights=spec.get("weights"))
    return AtomPrior(spec["atoms"], weights=spec.get("weights"))


def _build_noise(spec: dict):
    if spec["kind"] == "gaussian":
        return GaussianNoise(sigma=spec["sigma"])
    if spec["kind"] == "poisson":
        return PoissonNoise(gain=spec["gain"])
    return GammaNoise(shape_l=spec["shape_l"])


def _build_operator(spec: dict, n: int):
    if spec is None or spec["kind"] == "identity":
        return None
    return DiagonalMask(np.asarray(spec["mask"], dtype=np.float64))


def _build_estimator(spec: dict, n: int, m: int, rng: RngStream):
    if spec["kind"] == "affine":
        return AffineEstimator(
            n, m=m, constraint=spec.get("constraint", "none"), rng=rng
        )
    return BackprojectionMlp(n, spec.get("hidden", [16]), rng, m=m)


def _build_loss_fn(spec: dict, noise, n: int):
    kind = spec["kind"]
    if kind == "sup":
        return lambda batch, f, with_grad, rng: loss_sup(batch, f, with_grad=with_grad)
    if kind == "n2n":
        raise ConfigError(
            "loss.kind: n2n needs paired measurements; use r2r on single measurements"
        )
    if kind == "sure":
        cov = noise.cov_dense(n)
        backend = spec.get("backend", "analytic")
        return lambda batch, f, with_grad, rng: loss_sure(
            batch, f, cov, backend=backend, rng=rng, with_grad=with_grad
        )
    if kind == "r2r":
        alpha = spec.get("alpha", 0.1)
        metric = spec.get("metric", "l2")
        return lambda batch, f, with_grad, rng: loss_r2r(
            batch, f, noise, alpha, metric=metric, rng=rng, with_grad=with_grad
        )
    if kind == "gsure":
        return lambda batch, f, with_grad, rng: loss_gsure(
            batch, f, noise, with_grad=with_grad
        )
    if kind == "split_cv":
        gen = BernoulliSplitMask(q=spec.get("split_q", 0.5))
        return lambda batch, f, with_grad, rng: loss_split_cv(
            batch, f, gen, rng=rng, with_grad=with_grad
        )
    if kind == "mc":
        return lambda batch, f, with_grad, rng: loss_mc(batch, f, with_grad=with_grad)
    raise ConfigError(f"loss.kind: unknown {kind!r}")


def build_experiment(cfg: dict) -> dict:
    """Deterministically assemble prior, noise, data, estimator, and loss
    from a validated config."""
    rng = RngStream(cfg["seed"])
    prior = _build_prior(cfg["prior"])
    noise = _build_noise(cfg["noise"])
    n = prior.sample(1, RngStream(0)).shape[1]
    op = _build_operator(cfg.get("operator"), n)

    n_items = cfg["data"]["n_items"]
    n_test = cfg["data"].get("n_test", 0)
    X = prior.sample(n_items, rng)
    Y = noise.corrupt(X, rng)
    ops = None
    if op is not None:
        Y = op.apply(Y)
        ops = op
    test_ys = test_xs = None
    if n_test:
        test_xs = prior.sample(n_test, rng)
        test_ys = noise.corrupt(test_xs, rng)
        if op is not None:
            test_ys = op.apply(test_ys)
    source = ArraySource(
        Y, ops=ops, xs=X,
        test_ys=test_ys, test_ops=ops if n_test else None, test_xs=test_xs,
    )

    m = Y.shape[1]
    estimator = _build_estimator(cfg["estimator"], n, m, rng)
    loss_fn = _build_loss_fn(cfg["loss"], noise, n)

    tr = dict(cfg.get("train", {}))
    train_config = TrainConfig(
        optimizer=tr.get("optimizer", "adam"),
        lr=tr.get("lr", 1e-3),
        epochs=tr.get("epochs", 100),
        batch_size=tr.get("batch_size", 64),
        early_stop_patience=tr.get("early_stop_patience", 20),
        val_fraction=tr.get("val_fraction", 0.2),
        select=tr.get("select", "best_val"),
        seed=cfg["seed"],
        loss_spec=cfg["loss"],
        estimator_spec=cfg["estimator"],
    )
    return {
        "prior": prior,
        "noise": noise,
        "operator": op,
        "source": source,
        "estimator": estimator,
        "loss_fn": loss_fn,
        "train_config": train_config,
    }


def run_experiment(cfg: dict) -> dict:
    """Execute a validated config; returns the report dict (timestamp
    excluded from its hash)."""
    parts = build_experiment(cfg)
    f, rep = train(
        parts["train_config"], parts["source"], parts["loss_fn"], parts["estimator"]
    )
    report = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg["seed"],
        "curves": rep.curves,
        "best_epoch": rep.best_epoch,
        "stopped_epoch": rep.stopped_epoch,
        "final": rep.final,
        "params": [float(v) for v in f.get_params()],
    }
    report["report_hash"] = report_hash(report)
    report["timestamp"] = datetime.now(timezone.utc).isoformat()
    return report


def report_hash(report: dict) -> str:
    trimmed = {k: v for k, v in report.items() if k not in ("timestamp", "report_hash")}
    return config_hash(trimmed)


def write_json_atomic(path: str, obj) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv_atomic(path: str, rows: list, header: list) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow(row)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def curves_rows(report: dict) -> tuple:
    header = ["epoch", "train_loss", "val_loss", "oracle_mse"]
    rows = [
        [c["epoch"], c["train_loss"], c["val_loss"], c.get("oracle_mse", "")]
        for c in report["curves"]
    ]
    return rows, header


MERGED_HEADER = ["scenario", "method", "metric", "value", "se", "passed", "seed"]


def merge_reports(paths: list) -> list:
    """Flatten run reports and scenario results into one row table."""
    if not paths:
        raise ConfigError("report: at least one input file required")
    rows = []
    for path in paths:
        try:
            with open(path) as fh:
                obj = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"{path}: unreadable report ({e})")
        if "rows" in obj and "name" in obj:
            # scenario result
            for r in obj["rows"]:
                rows.append([
                    obj["name"], r.get("method", ""), r.get("metric", ""),
                    r.get("value", ""), r.get("se", ""), r.get("passed", ""),
                    obj.get("seed", ""),
                ])
        elif "final" in obj and "config" in obj:
            # run report
            method = obj["config"]["loss"]["kind"]
            for metric, value in sorted(obj["final"].items()):
                rows.append(["run", method, metric, value, "", "", obj["seed"]])
        else:
            raise ConfigError(f"{path}: not a recognized report schema")
    return rows
