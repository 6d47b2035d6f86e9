"""Command-line interface: ``bayesmtl <command> ...``.

Every command writes into an ``--out`` directory and finishes by atomically
writing ``manifest.json`` there. Numeric CSV cells carry 17 significant digits.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .baselines import CVConfig, L1Config, fit_pooled, fit_stl
from .core import Hyperparameters
from .dataio import (
    atomic_write_text,
    baseline_archive,
    bayes_archive,
    load_model,
    load_truth,
    predict_archive,
    read_table,
    save_dataset,
    save_model,
    save_truth,
    table_to_datasets,
    write_csv,
)
from .errors import BayesMTLError
from .inference import FitConfig
from .metrics import (
    METRIC_LABELS,
    METRIC_NAMES,
    calibration_curve,
    classification_report,
    cosine_distance,
    sparsity_ratio,
)
from .model_selection import default_hyper_grid, fit_bayes_cv
from .prediction import feature_importance, importance_vectors, predict_proba_interval, sparsity_coefficients
from .synthgen import generate, get_scenario, list_scenarios

METHODS = ("bayes-mtl", "stl-lc", "pooled-lc")
WORKERS_ENV = "BAYESMTL_WORKERS"
# accelerated solver for the baselines; same optimum as plain ISTA, far fewer iterations
BASELINE_SOLVER = L1Config(fista=True)
SCENARIO_NAMES = tuple(s.name for s in list_scenarios())


class CommandError(Exception):
    """A user-facing failure; reported on stderr with exit code 1."""


# ---- helpers ----


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(value):
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    return str(value)


def write_manifest(out_dir, command, args, inputs, outputs, started):
    manifest = {
        "command": command,
        "config": {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k != "handler"},
        "seed": getattr(args, "seed", None),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [os.path.relpath(p, out_dir) for p in outputs],
        "wall_clock_seconds": time.time() - started,
        "versions": {
            "bayesmtl": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    path = os.path.join(out_dir, "manifest.json")
    atomic_write_text(path, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def _load_data(args, group_column=None):
    table = read_table(args.data, group_column)
    return table_to_datasets(table, args.pseudocount, args.clr, args.intercept)


def _single_dataset(args):
    parts = _load_data(args)
    return parts[None]


def _hyper_grid(path, T):
    """JSON list of {alpha0, beta0, v0?, V0_scale? | V0?}; "default" gives the built-in grid."""
    if path in (None, "default"):
        return default_hyper_grid(T)
    with open(path, encoding="utf-8") as fh:
        entries = json.load(fh)
    if not isinstance(entries, list) or not entries:
        raise CommandError(f"{path}: hyperparameter grid must be a non-empty JSON list")
    grid = []
    for e in entries:
        V0 = np.asarray(e["V0"], dtype=float) if "V0" in e else e.get("V0_scale", 1.0) * np.eye(T)
        grid.append(Hyperparameters(e["alpha0"], e["beta0"], e.get("v0", T + 2.0), V0))
    return grid


def _lambda_grid(path):
    if path is None:
        return None
    with open(path, encoding="utf-8") as fh:
        values = json.load(fh)
    if not isinstance(values, list) or not values:
        raise CommandError(f"{path}: lambda grid must be a non-empty JSON list")
    return tuple(float(v) for v in values)


def _cv_rows(report, label):
    rows = []
    if report is None:
        return rows
    for i, cand in enumerate(report.candidates):
        if isinstance(cand, Hyperparameters):
            desc = f"alpha0={cand.alpha0:g};beta0={cand.beta0:g};v0={cand.v0:g};V0_scale={cand.V0[0, 0]:g}"
        else:
            desc = f"lambda={float(cand):.17g}"
        rows.append([label, i, desc, float(report.mean_loss[i]), float(report.std_loss[i]), int(i == report.selected)])
    return rows


CV_HEADER = ["scope", "candidate", "description", "mean_cross_entropy", "std_cross_entropy", "selected"]


def fit_method(data, method, seed, cv_repeats, cv_folds, hyper_grid=None, lambda_grid=None):
    """Fit one method with CV model selection. Returns (archive, cv rows)."""
    cv = CVConfig(repeats=cv_repeats, folds=cv_folds, seed=seed)
    cv_info = {"cv_repeats": cv_repeats, "cv_folds": cv_folds, "seed": seed}
    if method == "bayes-mtl":
        config = FitConfig(seed=seed)
        grid = hyper_grid if hyper_grid is not None else default_hyper_grid(data.T)
        result, hyper, report = fit_bayes_cv(data, grid, config, cv)
        info = dict(config.to_dict(), **cv_info, converged=result.converged, sweeps_run=result.sweeps_run)
        return bayes_archive(result, hyper, data, info), _cv_rows(report, "all")
    if method == "stl-lc":
        models, report = fit_stl(data, lambda_grid, cv, BASELINE_SOLVER)
        info = dict(cv_info, lam=models[0].lam)
        return baseline_archive("stl-lc", models, data, info), _cv_rows(report, "all")
    if method == "pooled-lc":
        model, report = fit_pooled(data, lambda_grid, cv, BASELINE_SOLVER)
        return baseline_archive("pooled-lc", model, data, dict(cv_info, lam=model.lam)), _cv_rows(report, "all")
    raise CommandError(f"unknown method {method!r}")


def _recovery_row(archive, truth):
    support = archive.selected.astype(int)
    z0 = (truth.z0 != 0).astype(int)
    scores = archive.state.phi if archive.kind == "bayes-mtl" else np.max(np.abs(archive.effective_weights), axis=0)
    rep = classification_report(z0, support, scores=scores if z0.any() else None)
    try:
        cos = cosine_distance(archive.effective_weights, truth.effective_weights)
    except BayesMTLError:
        cos = float("nan")
    return rep, cos, sparsity_ratio(archive.sparse_weights())


# ---- commands ----


def cmd_simulate(args):
    started = time.time()
    scenario = get_scenario(args.scenario, seed=args.seed, **({"d": args.d} if args.d else {}), **({"T": args.T} if args.T else {}))
    data, truth = generate(scenario)
    os.makedirs(args.out, exist_ok=True)
    data_path = os.path.join(args.out, "data.csv")
    truth_path = os.path.join(args.out, "truth.csv")
    save_dataset(data, data_path)
    save_truth(truth, truth_path)
    write_manifest(args.out, "simulate", args, [], [data_path, truth_path], started)


def cmd_fit(args):
    started = time.time()
    if args.method != "bayes-mtl" and args.hyper_grid not in (None, "default"):
        raise CommandError("--hyper-grid applies to bayes-mtl only; use --lambda-grid for baselines")
    parts = _load_data(args, args.group_column)
    os.makedirs(args.out, exist_ok=True)
    outputs, cv_rows = [], []
    lambda_grid = _lambda_grid(args.lambda_grid)
    for group, (data, _) in parts.items():
        grid = _hyper_grid(args.hyper_grid, data.T) if args.method == "bayes-mtl" else None
        archive, rows = fit_method(data, args.method, args.seed, args.cv_repeats, args.cv_folds, grid, lambda_grid)
        name = "model.json" if group is None else f"model-{group}.json"
        path = os.path.join(args.out, name)
        save_model(archive, path)
        outputs.append(path)
        cv_rows.extend([group if group is not None else ""] + r for r in rows)
    cv_path = os.path.join(args.out, "cv_report.csv")
    write_csv(cv_path, ["group"] + CV_HEADER, cv_rows)
    outputs.append(cv_path)
    write_manifest(args.out, "fit", args, [args.data] + ([args.hyper_grid] if args.hyper_grid not in (None, "default") else []), outputs, started)


def _all_predictions(archive, data):
    probs = predict_archive(archive, data)
    return probs, np.concatenate(probs)


def cmd_evaluate(args):
    started = time.time()
    if args.recovery and args.truth is None:
        raise CommandError("support recovery needs --truth")
    archive = load_model(args.model)
    data, _ = _single_dataset(args)
    probs, p_all = _all_predictions(archive, data)
    os.makedirs(args.out, exist_ok=True)
    header = ["task_id", "n"] + [METRIC_LABELS[m] for m in METRIC_NAMES]
    rows = []
    for task, p in zip(data.tasks, probs):
        rep = classification_report(task.labels, (p >= 0.5).astype(int), scores=p)
        rows.append([task.task_id, task.n] + [float(rep[m]) for m in METRIC_NAMES])
    rep = classification_report(data.y, (p_all >= 0.5).astype(int), scores=p_all)
    rows.append(["all", len(p_all)] + [float(rep[m]) for m in METRIC_NAMES])
    metrics_path = os.path.join(args.out, "metrics.csv")
    write_csv(metrics_path, header, rows)
    outputs = [metrics_path]
    inputs = [args.model, args.data]
    if args.truth is not None:
        truth = load_truth(args.truth)
        if truth.W0.shape != (archive.T, archive.d):
            raise CommandError(f"truth has shape {truth.W0.shape}, model is ({archive.T}, {archive.d})")
        rep, cos, ratio = _recovery_row(archive, truth)
        rec_path = os.path.join(args.out, "recovery.csv")
        write_csv(
            rec_path,
            ["kind"] + [METRIC_LABELS[m] for m in METRIC_NAMES] + ["Cosine Distance", "Sparsity Ratio"],
            [[archive.kind] + [float(rep[m]) for m in METRIC_NAMES] + [cos, ratio]],
        )
        outputs.append(rec_path)
        inputs.append(args.truth)
    write_manifest(args.out, "evaluate", args, inputs, outputs, started)


def cmd_predict(args):
    started = time.time()
    archive = load_model(args.model)
    data, ids = _single_dataset(args)
    index = {tid: t for t, tid in enumerate(archive.task_ids)}
    rows, k = [], 0
    for task in data.tasks:
        if task.task_id not in index:
            raise CommandError(f"task {task.task_id!r} was not seen during fitting")
        t = index[task.task_id]
        if archive.kind == "bayes-mtl":
            lo, mid, hi = predict_proba_interval(archive.state, t, task.design, args.samples, args.level, args.seed)
        else:
            mid = archive.predict_proba(t, task.design)
            lo = hi = mid
        for i in range(task.n):
            rows.append([ids[k], task.task_id, int(task.labels[i]), float(mid[i]), float(lo[i]), float(hi[i])])
            k += 1
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "predictions.csv")
    write_csv(path, ["sample_id", "task_id", "label", "probability", "lower", "upper"], rows)
    write_manifest(args.out, "predict", args, [args.model, args.data], [path], started)


def cmd_calibrate(args):
    started = time.time()
    archive = load_model(args.model)
    data, _ = _single_dataset(args)
    _, p_all = _all_predictions(archive, data)
    curve = calibration_curve(data.y, p_all, args.bins)
    rows = []
    for b in range(args.bins):
        rows.append([
            float(curve.bin_edges[b]), float(curve.bin_edges[b + 1]), int(curve.counts[b]),
            float(curve.mean_predicted[b]), float(curve.observed_frequency[b]),
        ])
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "calibration.csv")
    write_csv(path, ["bin_lower", "bin_upper", "count", "mean_predicted", "observed_frequency"], rows)
    write_manifest(args.out, "calibrate", args, [args.model, args.data], [path], started)


def cmd_importance(args):
    started = time.time()
    archive = load_model(args.model)
    if archive.kind != "bayes-mtl":
        raise CommandError("importance needs a bayes-mtl model")
    data, ids = _single_dataset(args)
    if data.task_ids != archive.task_ids:
        raise CommandError("importance needs the training tasks in their original order")
    levels = (0.05, 0.5, 0.95)
    report = feature_importance(archive.state, data, args.samples, args.seed, levels)
    coeffs = sparsity_coefficients(archive.state, args.samples, args.seed)
    coeff_q = np.quantile(coeffs, levels, axis=0)
    os.makedirs(args.out, exist_ok=True)
    imp_path = os.path.join(args.out, "importance.csv")
    write_csv(
        imp_path,
        ["feature", "mean"] + [f"q{lv:g}" for lv in levels],
        [[name, float(report.mean[j])] + [float(q) for q in report.quantiles[:, j]] for j, name in enumerate(archive.feature_names)],
    )
    sp_path = os.path.join(args.out, "sparsity.csv")
    write_csv(
        sp_path,
        ["feature", "phi", "mean"] + [f"q{lv:g}" for lv in levels],
        [
            [name, float(archive.state.phi[j]), float(coeffs[:, j].mean())] + [float(q) for q in coeff_q[:, j]]
            for j, name in enumerate(archive.feature_names)
        ],
    )
    # plug-in importance of every sample: unit norm unless all contributions vanish
    plug = archive.state.M * archive.state.phi
    rows, k = [], 0
    for t, task in enumerate(data.tasks):
        for vec in importance_vectors(plug[t][None], task.design)[0]:
            rows.append([ids[k], task.task_id] + [float(v) for v in vec])
            k += 1
    per_sample_path = os.path.join(args.out, "importance_samples.csv")
    write_csv(per_sample_path, ["sample_id", "task_id"] + list(archive.feature_names), rows)
    outputs = [imp_path, sp_path, per_sample_path]
    write_manifest(args.out, "importance", args, [args.model, args.data], outputs, started)


# ---- benchmark ----

CELL_METRICS = METRIC_NAMES + ("cosine_distance", "sparsity_ratio")
CELL_LABELS = dict(METRIC_LABELS, cosine_distance="Cosine Distance", sparsity_ratio="Sparsity Ratio")


def run_cell(scenario_name, method, seed, d, T, cv_repeats, cv_folds):
    """One benchmark cell. Failures are returned, not raised."""
    try:
        overrides = {k: v for k, v in (("d", d), ("T", T)) if v}
        data, truth = generate(get_scenario(scenario_name, seed=seed, **overrides))
        archive, _ = fit_method(data, method, seed, cv_repeats, cv_folds)
        rep, cos, ratio = _recovery_row(archive, truth)
        values = {**rep, "cosine_distance": cos, "sparsity_ratio": ratio}
        return {"values": values, "status": "ok"}
    except Exception as exc:  # recorded per cell, never fatal
        return {"values": {m: float("nan") for m in CELL_METRICS}, "status": f"error: {type(exc).__name__}: {exc}"}


def _workers(requested):
    if requested:
        return requested
    env = os.environ.get(WORKERS_ENV)
    return max(1, int(env)) if env else 1


def cmd_benchmark(args):
    started = time.time()
    if args.suite != "synthetic":
        raise CommandError(f"unknown suite {args.suite!r}")
    cells = [
        (sc, m, args.seed + k)
        for sc in args.scenarios
        for m in args.methods
        for k in range(args.seeds)
    ]
    call = [(sc, m, s, args.d, args.T, args.cv_repeats, args.cv_folds) for sc, m, s in cells]
    workers = _workers(args.workers)
    if workers == 1:
        results = [run_cell(*c) for c in call]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_cell, *zip(*call)))
    by_key = dict(zip(cells, results))

    os.makedirs(args.out, exist_ok=True)
    cell_rows = []
    for key in sorted(by_key):
        res = by_key[key]
        cell_rows.append(list(key) + [float(res["values"][m]) for m in CELL_METRICS] + [res["status"]])
    cells_path = os.path.join(args.out, "cells.csv")
    write_csv(cells_path, ["scenario", "method", "seed"] + [CELL_LABELS[m] for m in CELL_METRICS] + ["status"], cell_rows)

    summary_rows, table_rows = [], []
    for sc in args.scenarios:
        for m in args.methods:
            ok = [by_key[(sc, m, args.seed + k)] for k in range(args.seeds)]
            ok = [r["values"] for r in ok if r["status"] == "ok"]
            row = [sc, m, len(ok)]
            for name in CELL_METRICS:
                vals = np.array([v[name] for v in ok], dtype=float)
                mean = float(np.nanmean(vals)) if vals.size and not np.all(np.isnan(vals)) else float("nan")
                std = float(np.nanstd(vals)) if vals.size and not np.all(np.isnan(vals)) else float("nan")
                row += [mean, std]
            summary_rows.append(row)
    summary_path = os.path.join(args.out, "summary.csv")
    header = ["scenario", "method", "n_ok"]
    for name in CELL_METRICS:
        header += [f"{CELL_LABELS[name]} mean", f"{CELL_LABELS[name]} std"]
    write_csv(summary_path, header, summary_rows)

    # same numbers as a "mean (std)" table: one row per (scenario, metric), one column per method
    lookup = {(r[0], r[1]): r for r in summary_rows}
    for sc in args.scenarios:
        for i, name in enumerate(CELL_METRICS):
            cells_txt = []
            for m in args.methods:
                r = lookup[(sc, m)]
                cells_txt.append(f"{r[3 + 2 * i]:.3g} ({r[4 + 2 * i]:.2g})")
            table_rows.append([sc, CELL_LABELS[name]] + cells_txt)
    table_path = os.path.join(args.out, "table.csv")
    write_csv(table_path, ["Dataset", "Metrics"] + list(args.methods), table_rows)
    write_manifest(args.out, "benchmark", args, [], [cells_path, summary_path, table_path], started)


# ---- parser ----


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _level(text):
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError("level must lie in (0, 1)")
    return value


def _add_data_options(p):
    p.add_argument("--data", required=True, help="dataset CSV")
    p.add_argument("--clr", action="store_true", help="apply the CLR transform to the feature counts")
    p.add_argument("--pseudocount", type=float, default=1.0, help="added to counts before CLR (default 1.0)")
    p.add_argument("--intercept", action="store_true", help="append a constant-1 feature")


def build_parser():
    parser = argparse.ArgumentParser(prog="bayesmtl", description="Sparse Bayesian multitask logistic regression.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic benchmark dataset")
    p.add_argument("--scenario", required=True, choices=SCENARIO_NAMES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d", type=_positive_int, default=None, help="override the number of features")
    p.add_argument("--T", type=_positive_int, default=None, help="override the number of tasks")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("fit", help="fit a model with cross-validated model selection")
    _add_data_options(p)
    p.add_argument("--method", choices=METHODS, default="bayes-mtl")
    p.add_argument("--group-column", default=None, help="fit one model per value of this column")
    p.add_argument("--hyper-grid", default="default", help='JSON grid file for bayes-mtl, or "default"')
    p.add_argument("--lambda-grid", default=None, help="JSON list of L1 penalties for the baselines")
    p.add_argument("--cv-repeats", type=_positive_int, default=10)
    p.add_argument("--cv-folds", type=_positive_int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("evaluate", help="classification metrics and, with --truth, support and weight recovery")
    _add_data_options(p)
    p.add_argument("--model", required=True)
    p.add_argument("--truth", default=None, help="ground-truth CSV from simulate")
    p.add_argument("--recovery", action="store_true", help="require recovery scores (fails without --truth)")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_evaluate)

    for name, handler, helptext in (
        ("predict", cmd_predict, "per-sample probabilities with credible bands"),
        ("calibrate", cmd_calibrate, "reliability-curve CSV"),
        ("importance", cmd_importance, "feature importance and sparsity coefficient quantiles"),
    ):
        p = sub.add_parser(name, help=helptext)
        _add_data_options(p)
        p.add_argument("--model", required=True)
        p.add_argument("--samples", type=_positive_int, default=1000, help="posterior draws S")
        p.add_argument("--level", type=_level, default=0.9, help="credible level (default 0.9)")
        p.add_argument("--bins", type=_positive_int, default=10)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)
        p.set_defaults(handler=handler)

    p = sub.add_parser("benchmark", help="all methods on the synthetic scenarios over several seeds")
    p.add_argument("--suite", default="synthetic", choices=("synthetic",))
    p.add_argument("--seeds", type=_positive_int, default=10)
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--scenarios", nargs="+", choices=SCENARIO_NAMES, default=list(SCENARIO_NAMES))
    p.add_argument("--methods", nargs="+", choices=METHODS, default=list(METHODS))
    p.add_argument("--d", type=_positive_int, default=None)
    p.add_argument("--T", type=_positive_int, default=None)
    p.add_argument("--cv-repeats", type=_positive_int, default=10)
    p.add_argument("--cv-folds", type=_positive_int, default=5)
    p.add_argument("--workers", type=_positive_int, default=None, help=f"parallel cells (default ${WORKERS_ENV} or 1)")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_benchmark)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.handler(args)
    except (CommandError, BayesMTLError, ValueError, OSError, KeyError) as exc:
        print(f"bayesmtl {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
