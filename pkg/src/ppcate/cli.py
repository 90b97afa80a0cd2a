"""Command-line front end.

Exit codes: 0 success, 2 invalid input (schema, validation, bad flags),
3 numerical failure (a fit that did not converge and had no fallback).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numba
import numpy as np
import pandas as pd
import scipy

from . import __version__
from .data import SchemaError, ValidationError, check_overlap, read_csv, write_csv
from .inference import BootstrapError, bootstrap_ci
from .matching import dump_matches
from .parallel import default_workers
from .pipeline import PipelineConfig, fit_pipeline
from .scores import ConvergenceError, RankDeficientError, ScoreModel, require_converged
from .simulation import METHODS, ScenarioSpec, generate, run_benchmark, sweep_k
from .tree import CateTree, export_grid

logger = logging.getLogger("ppcate")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
MANIFEST_SCHEMA_VERSION = 1
PREDICTIONS_SCHEMA = ("row", "e_hat", "p_hat", "tau_hat", "leaf")


def versions() -> dict:
    return {
        "ppcate": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "numba": numba.__version__,
    }


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- arguments


def _k_arg(text):
    if text == "auto":
        return "auto"
    try:
        k = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"K must be 'auto' or an integer, got {text!r}")
    if k < 1:
        raise argparse.ArgumentTypeError("K must be >= 1")
    return k


def _add_config(p, bootstrap=False):
    g = p.add_argument_group("pipeline")
    g.add_argument("--config", type=Path, help="take the configuration from a run manifest")
    g.add_argument("--penalty", choices=("auto", "none", "lasso"))
    g.add_argument("--k", type=_k_arg, help="neighbours per unit, or 'auto' for round(ln n)")
    g.add_argument("--min-node", type=int, dest="min_node_size")
    g.add_argument("--cp-rule", choices=("min-cv", "one-se"))
    g.add_argument("--cp-floor", type=float)
    g.add_argument("--tree-folds", type=int)
    g.add_argument("--lasso-folds", type=int)
    g.add_argument("--eps", type=float, help="overlap threshold for warnings")
    g.add_argument("--prognostic-link", choices=("identity", "logit"))
    g.add_argument("--standardize-prognostic", action="store_true", default=None)
    g.add_argument("--seed", type=int)
    if bootstrap:
        g.add_argument("--b", type=int, dest="B", help="bootstrap resamples")
        g.add_argument("--level", type=float)


def _add_columns(p):
    g = p.add_argument_group("columns")
    g.add_argument("--y-col", default="y")
    g.add_argument("--z-col", default="z")
    g.add_argument("--x-cols", help="comma-separated covariate columns (default x1..xd)")
    g.add_argument("--tau-col", default="tau_true")


CONFIG_KEYS = ("penalty", "k", "min_node_size", "cp_rule", "cp_floor", "tree_folds",
               "lasso_folds", "eps", "prognostic_link", "standardize_prognostic", "seed",
               "B", "level")


def config_from_args(args) -> PipelineConfig:
    base = {}
    if getattr(args, "config", None):
        obj = json.loads(Path(args.config).read_text())
        base = dict(obj.get("config", obj))
    for key in CONFIG_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            base[key] = val
    return PipelineConfig.from_dict(base)


def _read(args):
    x_cols = args.x_cols.split(",") if args.x_cols else None
    return read_csv(args.input, args.y_col, args.z_col, x_cols, args.tau_col)


def _warn_overlap(scores, eps):
    rep = check_overlap(scores, eps)
    if rep.violated:
        logger.warning("overlap: %d of %d units have propensity outside [%g, %g]",
                       rep.count, len(scores), eps, 1 - eps)
    return rep


def _score_range(v):
    lo, hi = float(np.min(v)), float(np.max(v))
    if hi <= lo:
        lo, hi = lo - 1e-3, hi + 1e-3
    return lo, hi


# ----------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    spec = ScenarioSpec.default(args.scenario, seed=args.seed, full_scale=args.full_scale,
                                **{k: v for k, v in (("n", args.n), ("d", args.d)) if v})
    write_csv(generate(spec), args.out)
    logger.info("wrote %s (n=%d, d=%d)", args.out, spec.n, spec.d)
    return EXIT_OK


def cmd_fit(args) -> int:
    ds = _read(args)
    config = config_from_args(args)
    fitted = fit_pipeline(ds, config)
    require_converged(fitted.score_model)
    _warn_overlap(fitted.scores, config.eps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scores.json").write_text(fitted.score_model.to_json() + "\n")
    (out / "tree.json").write_text(fitted.tree.to_json() + "\n")
    (out / "tree.txt").write_text(fitted.tree.to_text() + "\n")
    grid = export_grid(fitted.tree, _score_range(fitted.scores.e_hat),
                       _score_range(fitted.scores.p_hat), args.grid_resolution)
    grid.to_csv(out / "grid.csv")
    if args.dump_matches:
        dump_matches(fitted.match, out / "matches.csv")
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "command": "fit",
        "config": config.to_dict(),
        "seed": config.seed,
        "versions": versions(),
        "input": {"file": Path(args.input).name, "sha256": _sha256(args.input),
                  "columns": list(ds.columns), "n": ds.n, "d": ds.d},
        "resolved": {"K": fitted.K, "k_clamped": fitted.match.clamped,
                     "penalty": fitted.score_model.penalty["mode"],
                     "n_leaves": fitted.tree.n_leaves,
                     "overlap_violations": fitted.overlap.count},
    }
    _write_json(out / "manifest.json", manifest)
    print(f"fitted {fitted.tree.n_leaves} leaves; bundle written to {out}")
    return EXIT_OK


def load_bundle(path):
    path = Path(path)
    try:
        model = ScoreModel.from_json((path / "scores.json").read_text())
        tree = CateTree.from_json((path / "tree.json").read_text())
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise SchemaError(f"incomplete bundle: {exc.filename} not found") from exc
    return model, tree, manifest


def predict_frame(model, tree, columns, df) -> pd.DataFrame:
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise SchemaError(f"covariate columns missing from input: {missing}")
    X = df[list(columns)].to_numpy(dtype=float)
    bad = np.flatnonzero(~np.isfinite(X).all(axis=1))
    if bad.size:
        raise ValidationError([f"non-finite covariate at rows {bad[:10].tolist()}"])
    scores = model.score(X)
    F = scores.as_matrix()
    return pd.DataFrame({
        "row": np.arange(len(df)),
        "e_hat": scores.e_hat,
        "p_hat": scores.p_hat,
        "tau_hat": tree.predict(F),
        "leaf": tree.apply(F),
    })


def cmd_predict(args) -> int:
    model, tree, manifest = load_bundle(args.bundle)
    columns = manifest["input"]["columns"]
    out = predict_frame(model, tree, columns, pd.read_csv(args.input, float_precision="round_trip"))
    out.to_csv(args.out, index=False, float_format="%.17g")
    print(f"wrote {len(out)} predictions to {args.out}")
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    ds = _read(args)
    config = config_from_args(args)
    res = bootstrap_ci(ds, config, workers=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res.to_csv(out / "intervals.csv")
    summary = res.summary(ds.tau_true)
    summary["config"] = config.to_dict()
    summary["versions"] = versions()
    _write_json(out / "summary.json", summary)
    msg = f"{res.B} resamples, mean width {summary['mean_width']:.4g}"
    if "coverage" in summary:
        msg += f", coverage {summary['coverage']:.3f}"
    print(msg)
    return EXIT_OK


def _methods(text):
    methods = [m.strip().lower() for m in text.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise argparse.ArgumentTypeError(f"methods must be drawn from {','.join(METHODS)}")
    return methods


def cmd_bench(args) -> int:
    seed = args.seed or 0
    spec = ScenarioSpec.default(args.scenario, seed=seed, full_scale=args.full_scale,
                                **{k: v for k, v in (("n", args.n), ("d", args.d)) if v})
    config = config_from_args(args)
    rep = run_benchmark(spec, args.methods, args.trials, config, seed,
                        bootstrap_B=args.B, bootstrap_level=config.level,
                        fix_coefficients=args.fix_coefficients, workers=args.threads)
    Path(args.out).write_text(rep.to_json() + "\n")
    for m, entry in rep.summary().items():
        line = f"{m}: mean MSE {entry['mean_mse']:.4g}"
        if "mean_coverage" in entry:
            line += f", mean coverage {entry['mean_coverage']:.3f}"
        print(line)
    if rep.failures:
        logger.warning("%d trial(s) failed; see report", len(rep.failures))
    return EXIT_OK


def cmd_sweep_k(args) -> int:
    spec = ScenarioSpec.default(args.scenario, **{k: v for k, v in (("n", args.n), ("d", args.d)) if v})
    config = config_from_args(args)
    ks = [int(k) for k in args.k_values.split(",")] if args.k_values else list(range(1, args.kmax + 1))
    rows = sweep_k(spec, ks, args.trials, config, args.seed or 0, workers=args.threads)
    text = "K,mean_mse\n" + "".join(f"{k},{v!r}\n" for k, v in rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ppcate", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a scenario dataset to CSV")
    p.add_argument("--scenario", type=int, required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--full-scale", action="store_true", help="scenario 7 at n=3000, d=5000")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit the estimator and write a model bundle")
    p.add_argument("input")
    p.add_argument("--out", required=True, help="bundle directory")
    p.add_argument("--dump-matches", action="store_true")
    p.add_argument("--grid-resolution", type=int, default=50)
    _add_config(p)
    _add_columns(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict effects for new rows from a bundle")
    p.add_argument("bundle")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("bootstrap-ci", help="percentile bootstrap intervals")
    p.add_argument("input")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=default_workers())
    _add_config(p, bootstrap=True)
    _add_columns(p)
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("bench", help="Monte Carlo benchmark on a scenario")
    p.add_argument("--scenario", type=int, required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--methods", type=_methods, default=["pp"])
    p.add_argument("--fix-coefficients", action="store_true")
    p.add_argument("--full-scale", action="store_true")
    p.add_argument("--threads", type=int, default=default_workers())
    p.add_argument("--out", required=True)
    _add_config(p, bootstrap=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep-k", help="mean MSE against the number of neighbours")
    p.add_argument("--scenario", type=int, default=1)
    p.add_argument("--n", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--kmax", type=int, default=50)
    p.add_argument("--k-values", help="comma-separated K values (overrides --kmax)")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--threads", type=int, default=default_workers())
    p.add_argument("--out")
    _add_config(p)
    p.set_defaults(func=cmd_sweep_k)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return EXIT_INVALID
    except (SchemaError, RankDeficientError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ConvergenceError, BootstrapError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
