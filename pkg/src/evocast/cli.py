"""Batch command line front end.

Four subcommands: run a search from a config file, retrain and score a
stored genotype, generate a synthetic dataset, and export plot-ready CSVs
from a finished run directory.  Exit codes: 0 success, 1 runtime failure,
2 configuration or input error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data import SynthConfig, load_csv, save_csv, split_blocks, synth_generate
from .genotype import GenotypeParseError, cnn_mlp_seed, deserialize_genotype, serialize_genotype
from .layers import ConfigError, StructuralError
from .search import SearchConfig, random_search_run, ssea_run
from .tensor import ContractError
from .trainer import TrainConfig, evaluate_candidate, mean_profile_baseline

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

WORKER_ENV = "EVOCAST_WORKERS"

ARTIFACTS = (
    "best_genotype.json",
    "convergence.csv",
    "selected_features.csv",
    "test_forecast.csv",
    "metrics.json",
)


class CliConfigError(ValueError):
    pass


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise CliConfigError(f"{path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from exc


def _build(cls, payload, where, required=()):
    if not isinstance(payload, dict):
        raise CliConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - names)
    if unknown:
        raise CliConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    for key in required:
        if key not in payload:
            raise CliConfigError(f"{where}.{key}: required key is missing")
    try:
        return cls(**payload)
    except TypeError as exc:
        raise CliConfigError(f"{where}: {exc}") from exc


def _load_dataset(payload, where):
    if not isinstance(payload, dict) or len(payload) != 1:
        raise CliConfigError(
            f"{where}: exactly one source required, either 'csv' or 'synth'"
        )
    (kind, value), = payload.items()
    if kind == "csv":
        if not Path(value).is_file():
            raise CliConfigError(f"{where}.csv: no such file {value}")
        return load_csv(value)
    if kind == "synth":
        return synth_generate(_build(SynthConfig, value, f"{where}.synth"))
    raise CliConfigError(f"{where}: unknown source {kind!r}")


def _train_config(payload, where="train"):
    cfg = _build(TrainConfig, payload, where)
    if cfg.epochs_joint < 0 or cfg.epochs_weights < 0:
        raise CliConfigError(f"{where}: epoch counts must be non-negative")
    return cfg


def _percent(x):
    return f"{100.0 * x:.3f}"


def _write_forecast_csv(path, dataset, forecast):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "instant", "actual", "forecast"])
        for t in range(dataset.days):
            for i in range(dataset.instants):
                writer.writerow(
                    [dataset.dates[t], i, repr(float(dataset.y[t, i])),
                     repr(float(forecast[t, i]))]
                )


def _write_features_csv(path, names, selected):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "selected"])
        for name, keep in zip(names, selected):
            writer.writerow([name, int(keep)])


def run_search_command(config_path):
    payload = _load_json(config_path)
    for key in ("dataset", "output_dir", "search", "train"):
        if key not in payload:
            raise CliConfigError(f"{key}: required key is missing")
    known = {"dataset", "output_dir", "search", "train", "algorithm", "fractions",
             "seed_architecture"}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise CliConfigError(f"unknown key(s) {', '.join(unknown)}")

    dataset = _load_dataset(payload["dataset"], "dataset")
    search_cfg = _build(SearchConfig, payload["search"], "search", required=("population",))
    if WORKER_ENV in os.environ:
        try:
            search_cfg.workers = int(os.environ[WORKER_ENV])
        except ValueError as exc:
            raise CliConfigError(f"{WORKER_ENV}: {os.environ[WORKER_ENV]!r}") from exc
    train_cfg = _train_config(payload["train"])
    algorithm = payload.get("algorithm", "ssea")
    if algorithm not in ("ssea", "rs"):
        raise CliConfigError(f"algorithm: must be 'ssea' or 'rs', got {algorithm!r}")
    fractions = tuple(payload.get("fractions", (0.7, 0.15, 0.15)))

    out_dir = Path(payload["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = split_blocks(dataset, fractions)

    seeds = []
    if payload.get("seed_architecture"):
        seeds.append(cnn_mlp_seed(dataset.instants, dataset.n_features))
    if algorithm == "ssea":
        result = ssea_run(splits, search_cfg, train_cfg, seed_genotypes=seeds)
    else:
        result = random_search_run(splits, search_cfg, train_cfg)
    if not np.isfinite(result.best.fitness):
        raise RuntimeError("search produced no trainable candidate")

    train, valid, test = splits
    final = evaluate_candidate(
        result.best.genotype, train, valid, test, train_cfg, with_test=True
    )
    if not np.isfinite(final.fitness):
        raise RuntimeError(f"final retrain failed: {final.error}")

    (out_dir / "best_genotype.json").write_text(
        serialize_genotype(result.best.genotype) + "\n"
    )
    result.log.write_csv(out_dir / "convergence.csv")
    _write_features_csv(
        out_dir / "selected_features.csv", dataset.feature_names, final.selected
    )
    _write_forecast_csv(out_dir / "test_forecast.csv", test, final.test_forecast)
    _, baseline = mean_profile_baseline(train, test)
    metrics = {
        "algorithm": algorithm,
        "evaluations": result.evaluations,
        "best_candidate_id": result.best.cid,
        "valid_mape_percent": float(100.0 * final.valid_metrics["mape"]),
        "test_mape_percent": float(100.0 * final.test_metrics["mape"]),
        "test_rmse": final.test_metrics["rmse"],
        "baseline_test_mape_percent": float(100.0 * baseline["mape"]),
        "n_selected_features": int(final.selected.sum()),
        "stopped_early": result.stopped_early,
    }
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    print(
        f"{algorithm}: {result.evaluations} evaluations, "
        f"valid MAPE {_percent(final.valid_metrics['mape'])}%, "
        f"test MAPE {_percent(final.test_metrics['mape'])}%, "
        f"test RMSE {final.test_metrics['rmse']:.1f}"
    )
    return EXIT_OK


def evaluate_command(genotype_path, dataset_path, config_path):
    for path in (genotype_path, dataset_path, config_path):
        if not Path(path).is_file():
            raise CliConfigError(f"no such file: {path}")
    try:
        genotype = deserialize_genotype(Path(genotype_path).read_text())
    except StructuralError as exc:
        raise CliConfigError(f"{genotype_path}: {exc}") from exc
    dataset = load_csv(dataset_path)
    payload = _load_json(config_path)
    train_cfg = _train_config(payload.get("train", payload))
    fractions = tuple(payload.get("fractions", (0.7, 0.15, 0.15)))
    train, valid, test = split_blocks(dataset, fractions)
    res = evaluate_candidate(genotype, train, valid, test, train_cfg, with_test=True)
    if not np.isfinite(res.fitness):
        raise RuntimeError(f"evaluation failed: {res.error}")
    m = res.test_metrics
    print(
        f"test MAPE {_percent(m['mape'])}%  MSE {m['mse']:.3f}  RMSE {m['rmse']:.3f}"
    )
    return EXIT_OK


def synth_command(config_path, out_path):
    cfg = _build(SynthConfig, _load_json(config_path), "synth")
    save_csv(synth_generate(cfg), out_path)
    print(f"wrote {out_path}")
    return EXIT_OK


def export_command(run_dir):
    run = Path(run_dir)
    needed = ("convergence.csv", "selected_features.csv", "test_forecast.csv")
    missing = [name for name in needed if not (run / name).is_file()]
    if missing:
        raise CliConfigError(f"{run_dir}: missing artifact(s) {', '.join(missing)}")

    with open(run / "convergence.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    with open(run / "export_convergence.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["wall_seconds", "best_fitness"])
        for row in rows:
            writer.writerow([row["wall_seconds"], row["best_fitness"]])

    with open(run / "test_forecast.csv", newline="") as fh:
        frows = list(csv.DictReader(fh))
    dates = sorted({r["date"] for r in frows})
    last_week = set(dates[-7:])
    with open(run / "export_last_week.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date", "instant", "actual", "forecast"])
        for row in frows:
            if row["date"] in last_week:
                writer.writerow(
                    [row["date"], row["instant"], row["actual"], row["forecast"]]
                )

    with open(run / "selected_features.csv", newline="") as fh:
        srows = list(csv.DictReader(fh))
    with open(run / "export_features.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "selected"])
        for row in srows:
            writer.writerow([row["feature"], row["selected"]])
    print(f"exported 3 files to {run_dir}")
    return EXIT_OK


def _parser():
    parser = argparse.ArgumentParser(
        prog="evocast",
        description="evolutionary day-ahead load forecast search",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("search", help="run a search from a config file")
    p.add_argument("config")
    p = sub.add_parser("evaluate", help="retrain a stored genotype and score it")
    p.add_argument("genotype")
    p.add_argument("dataset")
    p.add_argument("config")
    p = sub.add_parser("synth", help="generate a synthetic dataset CSV")
    p.add_argument("config")
    p.add_argument("out")
    p = sub.add_parser("export", help="emit plot-ready CSVs from a run directory")
    p.add_argument("run_dir")
    return parser


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        if args.command == "search":
            return run_search_command(args.config)
        if args.command == "evaluate":
            return evaluate_command(args.genotype, args.dataset, args.config)
        if args.command == "synth":
            return synth_command(args.config, args.out)
        return export_command(args.run_dir)
    except (CliConfigError, GenotypeParseError, ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, StructuralError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
