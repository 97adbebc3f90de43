"""Command-line front end.

Usage: implicitreg run CONFIG [--set key=value]... [--jobs J] [--out DIR]

Builds the configured model and dataset, dispatches the experiment, and
writes artifacts into the output directory: `config.echo` (the resolved
configuration), per-experiment CSVs, and `summary.txt` with the headline
numbers. Exit status: 0 on success, 1 when a verification criterion fails,
2 on usage errors. Re-running with an identical config and seed reproduces
every artifact byte for byte (no timestamps, repr-exact floats).

The environment variable IMPLICITREG_SEED, when set, overrides the base
training seed. Sweep run i at point p uses the derived seed
SeedSequence([base, p, i]) so the grid is reproducible and embarrassingly
parallel (--jobs).
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .batching import make_partition
from .config import ConfigError, ExperimentConfig, load_config
from .data import (
    Dataset,
    gaussian_cluster_split,
    gaussian_clusters,
    load_csv,
    xor_cluster_split,
    xor_clusters,
)
from .models import (
    LogisticRegressionModel,
    LossModel,
    SmallMlp,
    random_quadratic_ensemble,
)
from .optim import TrainConfig, derive_seed, train
from .verify import (
    ScalingReport,
    default_eps_grid,
    error_scaling_experiment,
    minibatch_grad_error_bruteforce,
    minibatch_grad_error_closed,
    nstep_first_order_check,
    nstep_scaling_experiment,
    palindrome_scaling_experiment,
    xi_expectation_closed,
    xi_expectation_direct,
)

__all__ = ["main", "run_experiment"]

SLOPE_TOL = 0.15
VARIANCE_REL_TOL = 1e-12


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _build_training_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset | None]:
    kind = cfg["dataset.kind"]
    if kind == "csv" or (kind == "auto" and cfg["dataset.csv_path"]):
        train_data = load_csv(cfg["dataset.csv_path"])
        test_data = (
            load_csv(cfg["dataset.test_csv_path"]) if cfg["dataset.test_csv_path"] else None
        )
        return train_data, test_data
    split = xor_cluster_split if kind == "xor" else gaussian_cluster_split
    single = xor_clusters if kind == "xor" else gaussian_clusters
    n_test = cfg["dataset.n_test"]
    if n_test > 0:
        return split(
            cfg["dataset.n"],
            n_test,
            cfg["dataset.dim"],
            separation=cfg["dataset.separation"],
            label_noise=cfg["dataset.noise"],
            seed=cfg["dataset.seed"],
        )
    data = single(
        cfg["dataset.n"],
        cfg["dataset.dim"],
        separation=cfg["dataset.separation"],
        label_noise=cfg["dataset.noise"],
        seed=cfg["dataset.seed"],
    )
    return data, None


def build_model(cfg: ExperimentConfig) -> tuple[LossModel, np.ndarray, Dataset | None]:
    """Model, initial parameters, and optional held-out data per the config."""
    kind = cfg["model.kind"]
    if kind == "quadratic":
        model = random_quadratic_ensemble(
            cfg["dataset.n"], cfg["model.dim"], seed=cfg["dataset.seed"]
        )
        return model, model.random_params(cfg["model.init_seed"]), None
    train_data, test_data = _build_training_data(cfg)
    if kind == "logistic":
        model = LogisticRegressionModel(train_data)
    else:
        widths = list(cfg["model.widths"])
        if widths[0] != train_data.n_features:
            raise ConfigError(
                f"model.widths: input width {widths[0]} does not match the "
                f"dataset's {train_data.n_features} features"
            )
        model = SmallMlp(train_data, widths, activation=cfg["model.activation"])
    return model, model.init_params(cfg["model.init_seed"]), test_data


def _train_config(cfg: ExperimentConfig, **replacements) -> TrainConfig:
    base = dict(
        epsilon=cfg["train.epsilon"],
        lambda_=cfg["train.lambda"],
        batch_size=cfg["train.batch_size"],
        epochs=cfg["train.epochs"],
        n_step=cfg["train.n_step"],
        weight_decay=cfg["train.weight_decay"],
        lr_decay=cfg["train.lr_decay"],
        reshuffle_each_epoch=cfg["train.reshuffle_each_epoch"],
        seed=cfg["train.seed"],
        eval_every=cfg["train.eval_every"],
    )
    base.update(replacements)
    return TrainConfig(**base)


def _eps_grid(cfg: ExperimentConfig, m: int):
    eps_max = cfg["verify.eps_max"]
    return default_eps_grid(
        m,
        points=cfg["verify.eps_points"],
        eps_max=None if eps_max == 0 else eps_max,
    )


def _write_scaling_artifacts(
    out: Path, report: ScalingReport, target_slope: float
) -> bool:
    _write_csv(
        out / "scaling.csv",
        ["epsilon", "error_norm"],
        [[e, err] for e, err in report.rows()],
    )
    _write_csv(
        out / "summary.csv",
        ["slope", "intercept", "mode", "samples", "flow_substeps"],
        [[report.slope, report.intercept, report.mode, report.samples, report.flow_substeps]],
    )
    ok = (
        not report.unreliable
        and math.isfinite(report.slope)
        and abs(report.slope - target_slope) <= SLOPE_TOL
    )
    lines = [
        f"slope={_fmt(report.slope)}",
        f"intercept={_fmt(report.intercept)}",
        f"mode={report.mode}",
        f"samples={report.samples}",
        f"flow_substeps={report.flow_substeps}",
        f"target=slope {target_slope}+-{SLOPE_TOL}",
        f"result={'pass' if ok else 'FAIL'}",
    ]
    if report.unreliable:
        lines.append("note=monte-carlo stderr exceeded 10% of the error; fit refused")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return ok


def _run_scaling_family(cfg: ExperimentConfig, out: Path) -> int:
    model, params, _ = build_model(cfg)
    batch = cfg["train.batch_size"]
    if model.n_examples % batch != 0:
        raise ConfigError(
            f"train.batch_size: batch size must divide dataset size "
            f"(N={model.n_examples}, B={batch})"
        )
    partition = make_partition(model.n_examples, batch)
    grid = _eps_grid(cfg, partition.m)
    substeps = cfg["verify.flow_substeps"]
    experiment = cfg.experiment
    if experiment == "scaling":
        flow_kind = "gd_modified" if partition.m == 1 else "sgd_modified"
        report = error_scaling_experiment(
            model,
            params,
            partition,
            grid,
            flow_substeps=substeps,
            flow_kind=flow_kind,
            mc_samples=cfg["verify.mc_samples"],
            seed=cfg["train.seed"],
        )
        target = 3.0
    elif experiment == "palindrome":
        report = palindrome_scaling_experiment(
            model, params, partition, grid, flow_substeps=substeps
        )
        target = 3.0
    elif experiment == "nstep-scaling":
        report = nstep_scaling_experiment(
            model,
            params,
            partition,
            cfg["train.n_step"],
            grid,
            flow_substeps=substeps,
            mc_samples=cfg["verify.mc_samples"],
            seed=cfg["train.seed"],
        )
        target = 3.0
    else:  # nstep-first-order
        report = nstep_first_order_check(
            model, params, partition.batch(0), cfg["train.n_step"], grid
        )
        target = 2.0
    ok = _write_scaling_artifacts(out, report, target)
    return 0 if ok else 1


def _run_variance_oracle(cfg: ExperimentConfig, out: Path) -> int:
    model, params, _ = build_model(cfg)
    n = model.n_examples
    rows = []
    max_rel = 0.0
    for b in range(1, n + 1):
        if n % b != 0:
            continue
        brute = minibatch_grad_error_bruteforce(model, params, b)
        closed = minibatch_grad_error_closed(model, params, b)
        rel = abs(brute - closed) / max(abs(closed), 1e-300)
        max_rel = max(max_rel, rel)
        rows.append([b, brute, closed, rel])
    _write_csv(out / "variance.csv", ["batch_size", "bruteforce", "closed", "rel_gap"], rows)
    ok = max_rel < VARIANCE_REL_TOL
    (out / "summary.txt").write_text(
        f"max_rel_gap={_fmt(max_rel)}\n"
        f"target=max_rel_gap < {VARIANCE_REL_TOL}\n"
        f"result={'pass' if ok else 'FAIL'}\n"
    )
    return 0 if ok else 1


def _run_xi_check(cfg: ExperimentConfig, out: Path) -> int:
    model, params, _ = build_model(cfg)
    batch = cfg["train.batch_size"]
    if model.n_examples % batch != 0:
        raise ConfigError(
            f"train.batch_size: batch size must divide dataset size "
            f"(N={model.n_examples}, B={batch})"
        )
    partition = make_partition(model.n_examples, batch)
    direct = xi_expectation_direct(model, params, partition)
    closed = xi_expectation_closed(model, params, partition)
    _write_csv(
        out / "xi.csv",
        ["coordinate", "direct", "closed"],
        [[i, float(direct[i]), float(closed[i])] for i in range(model.dim)],
    )
    abs_gap = float(np.max(np.abs(direct - closed)))
    rel_gap = float(
        np.linalg.norm(direct - closed) / max(np.linalg.norm(closed), 1e-300)
    )
    ok = abs_gap < 1e-10 or rel_gap < 1e-8
    (out / "summary.txt").write_text(
        f"max_abs_gap={_fmt(abs_gap)}\n"
        f"rel_gap={_fmt(rel_gap)}\n"
        "target=abs < 1e-10 or rel < 1e-8\n"
        f"result={'pass' if ok else 'FAIL'}\n"
    )
    return 0 if ok else 1


TRAIN_CSV_HEADER = [
    "epoch",
    "train_loss",
    "train_accuracy",
    "test_loss",
    "test_accuracy",
    "c_reg_value",
    "grad_norm_sq",
]


def _record_rows(record) -> list[list]:
    return [
        [
            r.epoch,
            r.train_loss,
            r.train_accuracy,
            r.test_loss,
            r.test_accuracy,
            r.c_reg_value,
            r.grad_norm_sq,
        ]
        for r in record.rows
    ]


def _run_train(cfg: ExperimentConfig, out: Path) -> int:
    model, params, test_data = build_model(cfg)
    record = train(model, params, _train_config(cfg), test_data=test_data)
    _write_csv(out / "train.csv", TRAIN_CSV_HEADER, _record_rows(record))
    (out / "summary.txt").write_text(
        f"epochs_completed={len(record.rows)}\n"
        f"best_test_accuracy={_fmt(record.best_test_accuracy())}\n"
        f"final_test_accuracy={_fmt(record.final_test_accuracy())}\n"
        f"final_c_reg={_fmt(record.final_c_reg())}\n"
        f"diverged={str(record.diverged).lower()}\n"
        f"params_digest={record.params_digest}\n"
    )
    return 0


def _sweep_point_config(cfg: ExperimentConfig, value: float) -> dict:
    """TrainConfig overrides realizing one sweep point."""
    param = cfg["sweep.parameter"]
    if param == "epsilon":
        return {"epsilon": float(value)}
    if param == "lambda":
        return {"lambda_": float(value)}
    if param == "n_step":
        return {"n_step": int(value)}
    # batch_size, optionally dragging epsilon along at fixed epsilon/B ratio
    overrides: dict = {"batch_size": int(value)}
    if cfg["sweep.link_epsilon_to_batch"]:
        overrides["epsilon"] = cfg["train.epsilon"] * int(value) / cfg["train.batch_size"]
    return overrides


def _sweep_run(payload: tuple) -> tuple[int, int, float, float, bool]:
    """One training run of a sweep grid; top level so process pools can pickle it."""
    cfg, point, run_idx, value = payload
    run_seed = derive_seed(cfg["train.seed"], point, run_idx)
    overrides = _sweep_point_config(cfg, value)
    overrides["seed"] = run_seed
    model, _, test_data = build_model(cfg)
    init = (
        model.random_params(derive_seed(run_seed, 1))
        if cfg["model.kind"] == "quadratic"
        else model.init_params(derive_seed(run_seed, 1))
    )
    record = train(model, init, _train_config(cfg, **overrides), test_data=test_data)
    return (
        point,
        run_idx,
        record.best_test_accuracy(),
        record.final_c_reg(),
        record.diverged,
    )


def _run_sweep(cfg: ExperimentConfig, out: Path, jobs: int) -> int:
    values = cfg["sweep.values"]
    runs = cfg["sweep.runs_per_point"]
    keep = cfg["sweep.keep_best"]
    payloads = [
        (cfg, p, i, v) for p, v in enumerate(values) for i in range(runs)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_run, payloads))
    else:
        results = [_sweep_run(p) for p in payloads]
    by_point: dict[int, list] = {}
    for point, run_idx, best_acc, final_creg, diverged in results:
        by_point.setdefault(point, []).append((run_idx, best_acc, final_creg, diverged))

    rows = []
    any_diverged = False
    for p, value in enumerate(values):
        entries = sorted(by_point[p])  # deterministic run order
        any_diverged |= any(e[3] for e in entries)
        kept = sorted(entries, key=lambda e: (-e[1], e[0]))[:keep]
        accs = np.array([e[1] for e in kept])
        cregs = np.array([e[2] for e in kept])
        std = float(accs.std(ddof=1)) if len(accs) > 1 else 0.0
        rows.append([float(value), float(accs.mean()), std, float(cregs.mean())])
    _write_csv(
        out / "sweep.csv",
        ["param", "mean_best_acc", "std_best_acc", "mean_final_creg"],
        rows,
    )
    best_row = max(rows, key=lambda r: r[1])
    (out / "summary.txt").write_text(
        f"parameter={cfg['sweep.parameter']}\n"
        f"points={len(values)}\n"
        f"runs_per_point={runs} keep_best={keep}\n"
        f"best_value={_fmt(best_row[0])}\n"
        f"best_mean_accuracy={_fmt(best_row[1])}\n"
        f"any_diverged={str(any_diverged).lower()}\n"
    )
    return 0


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path, jobs: int = 1) -> int:
    """Dispatch the configured experiment; returns the process exit code."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text("\n".join(cfg.echo_lines()) + "\n")
    experiment = cfg.experiment
    if experiment in ("scaling", "palindrome", "nstep-scaling", "nstep-first-order"):
        return _run_scaling_family(cfg, out)
    if experiment == "variance-oracle":
        return _run_variance_oracle(cfg, out)
    if experiment == "xi-check":
        return _run_xi_check(cfg, out)
    if experiment == "train":
        return _run_train(cfg, out)
    return _run_sweep(cfg, out, jobs)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="implicitreg",
        description="Config-driven experiments for SGD implicit regularization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="run the experiment described by a config file")
    run_p.add_argument("config", help="path to a flat `section.key = value` file")
    run_p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config entry (repeatable)",
    )
    run_p.add_argument("--jobs", type=int, default=1, help="parallel sweep workers")
    run_p.add_argument("--out", default=None, help="output directory (overrides output.dir)")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits itself on --help (0) and usage errors (2)
        return exc.code if isinstance(exc.code, int) else 2
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        overrides = list(args.overrides)
        seed_env = os.environ.get("IMPLICITREG_SEED")
        if seed_env is not None:
            overrides.append(f"train.seed={seed_env}")
        cfg = load_config(args.config, overrides)
        out_dir = args.out if args.out is not None else cfg["output.dir"]
        return run_experiment(cfg, out_dir, jobs=args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
