"""Command-line surface: ingestion, fitting, prediction, CV, paths,
synthetic generation, ablations, and dummy expansion.

Configuration comes from flags plus an optional JSON config file
(--config); explicitly given flags override file values.  All randomness
derives from the single --seed.  Exit codes: 0 success, 2 config error,
3 data error, 4 numeric divergence, 5 budget exhausted before
convergence.  Wall-clock columns in traces and reports are the one
output not covered by the determinism guarantee.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import io as mio
from .errors import ConfigError, DataError, MatcompError
from .harness import (
    SyntheticSpec,
    cross_validate,
    default_lambda_grid,
    generate_synthetic,
    lambda_path,
    side_info_ablation,
)
from .losses import Loss
from .model import build_spec
from .sideinfo import (
    column_subspace_model,
    nested_spline_bases,
    projection_hat,
    ridge_hat,
)
from .serialize import load_model, save_model
from .solver import SolveOptions, fit_proximal, lambda_max, predict

EXIT_CODES = {"config": 2, "data": 3, "numeric": 4, "budget": 5}


@dataclass
class RunConfig:
    command: str
    obs: str = None
    format: str = None
    n_rows: int = None
    n_cols: int = None
    row_features: str = None
    col_features: str = None
    loss: str = "bernoulli"
    theta_cap: float = None
    intercept: bool = True
    row_effects: str = "none"
    col_effects: str = "none"
    row_metric: str = "identity"
    col_metric: str = "identity"
    lam_gamma: float = None
    lam_alpha: float = 0.0
    lam_beta: float = 0.0
    lams: str = None
    n_lams: int = 8
    lam_min_ratio: float = 0.01
    folds: int = 3
    test_fraction: float = 0.2
    max_iters: int = 500
    tol: float = 1e-8
    time_budget: float = math.inf
    step_mode: str = "fixed"
    step_size: float = None
    polish: bool = False
    seed: int = 0
    model_out: str = None
    trace_out: str = None
    trace_dir: str = None
    report_out: str = None
    out: str = None
    model: str = None
    pairs: str = None
    n: int = 1000
    m: int = 800
    rank: int = 10
    entries_per_row: int = 40
    factor_scale: float = 2.0
    truth_out: str = None
    input: str = None
    column: str = None


_CONFIG_KEYS = {f.name for f in fields(RunConfig)}


def build_parser():
    p = argparse.ArgumentParser(prog="matcomp", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file; flags override it")
        sp.add_argument("--seed", type=int)

    def data_flags(sp):
        sp.add_argument("--obs", help="observations (triplet CSV or MatrixMarket)")
        sp.add_argument("--format", choices=[mio.TRIPLET_CSV, mio.MATRIX_MARKET])
        sp.add_argument("--n-rows", type=int, dest="n_rows")
        sp.add_argument("--n-cols", type=int, dest="n_cols")

    def model_flags(sp):
        sp.add_argument("--loss", choices=["gaussian", "bernoulli", "poisson"])
        sp.add_argument("--theta-cap", type=float, dest="theta_cap")
        sp.add_argument("--intercept", action=argparse.BooleanOptionalAction, default=None)
        sp.add_argument("--row-effects", choices=["none", "intercept", "features"],
                        dest="row_effects")
        sp.add_argument("--col-effects", choices=["none", "intercept", "features"],
                        dest="col_effects")
        sp.add_argument("--row-features", dest="row_features")
        sp.add_argument("--col-features", dest="col_features")
        sp.add_argument("--row-metric", dest="row_metric",
                        help="identity | projection | ridge:sigma2=..,precision=..")
        sp.add_argument("--col-metric", dest="col_metric",
                        help="identity | projection | ridge:... | spline:df_coarse=..,df_fine=..")
        sp.add_argument("--lam-alpha", type=float, dest="lam_alpha")
        sp.add_argument("--lam-beta", type=float, dest="lam_beta")

    def solver_flags(sp):
        sp.add_argument("--max-iters", type=int, dest="max_iters")
        sp.add_argument("--tol", type=float)
        sp.add_argument("--time-budget", type=float, dest="time_budget")
        sp.add_argument("--step-mode", choices=["fixed", "backtracking"], dest="step_mode")
        sp.add_argument("--step-size", type=float, dest="step_size")
        sp.add_argument("--polish", action=argparse.BooleanOptionalAction, default=None)

    def grid_flags(sp):
        sp.add_argument("--lams", help="comma-separated descending penalty grid")
        sp.add_argument("--n-lams", type=int, dest="n_lams")
        sp.add_argument("--lam-min-ratio", type=float, dest="lam_min_ratio")

    sp = sub.add_parser("fit", help="fit one model")
    common(sp); data_flags(sp); model_flags(sp); solver_flags(sp)
    sp.add_argument("--lam-gamma", type=float, dest="lam_gamma")
    sp.add_argument("--model-out", dest="model_out")
    sp.add_argument("--trace-out", dest="trace_out")

    sp = sub.add_parser("predict", help="predict at (row, col) pairs from a model file")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--pairs", required=True, help="CSV with header row,col")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("path", help="fit a descending penalty path")
    common(sp); data_flags(sp); model_flags(sp); solver_flags(sp); grid_flags(sp)
    sp.add_argument("--test-fraction", type=float, dest="test_fraction")
    sp.add_argument("--report-out", dest="report_out")
    sp.add_argument("--trace-dir", dest="trace_dir")

    sp = sub.add_parser("cv", help="cross-validate the penalty and refit")
    common(sp); data_flags(sp); model_flags(sp); solver_flags(sp); grid_flags(sp)
    sp.add_argument("--folds", type=int)
    sp.add_argument("--report-out", dest="report_out")
    sp.add_argument("--model-out", dest="model_out")

    sp = sub.add_parser("ablate", help="paired comparison: configured metrics vs identity")
    common(sp); data_flags(sp); model_flags(sp); solver_flags(sp); grid_flags(sp)
    sp.add_argument("--folds", type=int)
    sp.add_argument("--test-fraction", type=float, dest="test_fraction")
    sp.add_argument("--report-out", dest="report_out")

    sp = sub.add_parser("synth", help="generate synthetic observations")
    common(sp)
    sp.add_argument("--n", type=int)
    sp.add_argument("--m", type=int)
    sp.add_argument("--rank", type=int)
    sp.add_argument("--entries-per-row", type=int, dest="entries_per_row")
    sp.add_argument("--loss", choices=["gaussian", "bernoulli", "poisson"])
    sp.add_argument("--theta-cap", type=float, dest="theta_cap")
    sp.add_argument("--factor-scale", type=float, dest="factor_scale")
    sp.add_argument("--format", choices=[mio.TRIPLET_CSV, mio.MATRIX_MARKET])
    sp.add_argument("--out", required=True)
    sp.add_argument("--truth-out", dest="truth_out")

    sp = sub.add_parser("dummies", help="expand a categorical column into dummy features")
    common(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--column", required=True)
    sp.add_argument("--out", required=True)
    return p


def config_from_args(args) -> RunConfig:
    cfg = RunConfig(command=args.command)
    file_vals = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                file_vals = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config file: {e}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from None
        bad = set(file_vals) - _CONFIG_KEYS
        if bad:
            raise ConfigError(f"unknown config keys: {sorted(bad)}")
    for key, val in file_vals.items():
        setattr(cfg, key, val)
    for key in _CONFIG_KEYS:
        if hasattr(args, key) and getattr(args, key) is not None:
            setattr(cfg, key, getattr(args, key))
    return cfg


def parse_metric_spec(text):
    name, _, rest = text.partition(":")
    name = name.strip()
    params = {}
    if rest:
        for piece in rest.split(","):
            k, _, v = piece.partition("=")
            if not _:
                raise ConfigError(f"malformed metric parameter {piece!r}")
            params[k.strip()] = float(v)
    if name not in ("identity", "projection", "ridge", "spline"):
        raise ConfigError(f"unknown metric spec {name!r}")
    return name, params


def _loss_from_config(cfg: RunConfig) -> Loss:
    if cfg.loss == "poisson":
        if cfg.theta_cap is None:
            raise ConfigError("poisson loss requires --theta-cap")
        return Loss.poisson(cfg.theta_cap)
    return Loss(cfg.loss)


def _features(cfg, side, dim):
    path = cfg.row_features if side == "row" else cfg.col_features
    if path is None:
        return None
    return mio.read_features(path, expected_rows=dim)


def _build_model_spec(cfg: RunConfig, y, lam_gamma):
    loss = _loss_from_config(cfg)
    row_feats = _features(cfg, "row", y.n_rows)
    col_feats = _features(cfg, "col", y.n_cols)
    metadata = {}

    def metric_for(side, spec_text, feats, dim):
        name, params = parse_metric_spec(spec_text)
        if name == "identity":
            return None, None
        if name == "spline":
            if side != "col":
                raise ConfigError("spline metric attaches to the column margin only")
            df_c = int(params.get("df_coarse", 4))
            df_f = int(params.get("df_fine", 12))
            points = np.arange(dim, dtype=np.float64)
            pair = nested_spline_bases(points, df_c, df_f)
            sub = column_subspace_model(pair.coarse, pair.fine)
            metadata["spline"] = {
                "df_coarse": df_c, "df_fine": df_f,
                "knots_coarse": list(pair.coarse_knots),
                "knots_fine": list(pair.fine_knots),
            }
            return None, sub
        if feats is None:
            raise ConfigError(f"{name} metric on the {side} margin needs --{side}-features")
        if name == "projection":
            return projection_hat(feats), None
        sigma2 = params.get("sigma2", 1.0)
        precision = params.get("precision", 1.0)
        p = feats.shape[1]
        return ridge_hat(feats, sigma2, precision * np.eye(p)), None

    row_metric, _ = metric_for("row", cfg.row_metric, row_feats, y.n_rows)
    col_metric, col_sub = metric_for("col", cfg.col_metric, col_feats, y.n_cols)

    def offset_feats(effects, feats, side):
        if effects == "features":
            if feats is None:
                raise ConfigError(f"{side}_effects='features' needs --{side}-features")
            return feats.values
        return None

    return build_spec(
        loss, y.n_rows, y.n_cols, lam_gamma=lam_gamma,
        intercept=cfg.intercept,
        row_effects=cfg.row_effects, col_effects=cfg.col_effects,
        row_features=offset_feats(cfg.row_effects, row_feats, "row"),
        col_features=offset_feats(cfg.col_effects, col_feats, "col"),
        lam_alpha=cfg.lam_alpha, lam_beta=cfg.lam_beta,
        row_metric=row_metric, col_metric=col_metric, col_subspace=col_sub,
        metadata=metadata,
    )


def _solve_options(cfg: RunConfig) -> SolveOptions:
    return SolveOptions(
        max_outer_iterations=cfg.max_iters,
        time_budget=cfg.time_budget,
        rel_tol=cfg.tol,
        step_mode=cfg.step_mode,
        step_size=cfg.step_size,
        final_polish=cfg.polish,
        seed=cfg.seed,
    )


def _read_obs(cfg: RunConfig):
    if not cfg.obs:
        raise ConfigError("--obs is required")
    return mio.read_observations(cfg.obs, fmt=cfg.format,
                                 n_rows=cfg.n_rows, n_cols=cfg.n_cols)


def _grid(cfg: RunConfig, spec, y):
    if cfg.lams:
        try:
            grid = [float(s) for s in str(cfg.lams).split(",")]
        except ValueError as e:
            raise ConfigError(f"bad --lams value: {e}") from None
        return grid
    lmax = lambda_max(spec, y, _solve_options(cfg))
    return default_lambda_grid(lmax, n_points=cfg.n_lams, min_ratio=cfg.lam_min_ratio)


def cmd_fit(cfg: RunConfig):
    if cfg.lam_gamma is None:
        raise ConfigError("fit requires --lam-gamma")
    y = _read_obs(cfg)
    spec = _build_model_spec(cfg, y, cfg.lam_gamma)
    state, trace = fit_proximal(spec, y, _solve_options(cfg))
    if cfg.model_out:
        save_model(cfg.model_out, spec, state, seed=cfg.seed,
                   extra={"converged": trace.converged, "stop_reason": trace.stop_reason})
    if cfg.trace_out:
        mio.write_trace_csv(trace, cfg.trace_out)
    if not trace.converged:
        print(f"warning: stopped on {trace.stop_reason} before reaching tolerance",
              file=sys.stderr)
        return EXIT_CODES["budget"]
    return 0


def cmd_predict(cfg: RunConfig):
    spec, state, _ = load_model(cfg.model)
    pairs = []
    with open(cfg.pairs) as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:2]] != ["row", "col"]:
            raise DataError(f"{cfg.pairs}: expected header 'row,col'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                pairs.append((int(row[0]), int(row[1])))
            except ValueError as e:
                raise DataError(f"{cfg.pairs}:{lineno}: {e}") from None
    if not pairs:
        raise DataError(f"{cfg.pairs}: no prediction pairs")
    theta, mean = predict(spec, state, np.asarray(pairs))
    out = ["row,col,theta,mean"]
    for (i, j), t, m in zip(pairs, theta, mean):
        out.append(f"{i},{j},{t!r},{m!r}")
    mio.atomic_write(cfg.out, "\n".join(out) + "\n")
    return 0


def cmd_path(cfg: RunConfig):
    from .harness import split

    y = _read_obs(cfg)
    spec = _build_model_spec(cfg, y, lam_gamma=1.0)
    grid = _grid(cfg, spec, y)
    test = None
    train = y
    if cfg.test_fraction and cfg.test_fraction > 0:
        train, test = split(y, 1.0 - cfg.test_fraction, cfg.seed)
    points, _, traces = lambda_path(spec, train, grid, _solve_options(cfg),
                                    test=test, collect_traces=True)
    if cfg.report_out:
        mio.write_report_csv(points, cfg.report_out)
    if cfg.trace_dir:
        os.makedirs(cfg.trace_dir, exist_ok=True)
        for k, tr in enumerate(traces):
            mio.write_trace_csv(tr, os.path.join(cfg.trace_dir, f"trace_lam{k}.csv"))
    return 0


def cmd_cv(cfg: RunConfig):
    y = _read_obs(cfg)
    spec = _build_model_spec(cfg, y, lam_gamma=1.0)
    grid = _grid(cfg, spec, y)
    res = cross_validate(spec, y, cfg.folds, grid, _solve_options(cfg), seed=cfg.seed)
    if cfg.report_out:
        rows = ["lam,cv_deviance,selected"]
        for lam, dev in zip(res.grid, res.mean_deviance):
            rows.append(f"{lam!r},{dev!r},{int(lam == res.lam)}")
        mio.atomic_write(cfg.report_out, "\n".join(rows) + "\n")
    if cfg.model_out:
        save_model(cfg.model_out, res.spec, res.state, seed=cfg.seed,
                   extra={"cv_lambda": res.lam})
    return 0


def cmd_ablate(cfg: RunConfig):
    y = _read_obs(cfg)
    spec = _build_model_spec(cfg, y, lam_gamma=1.0)
    base = _build_identity_variant(cfg, y)
    grid = _grid(cfg, spec, y)
    results = side_info_ablation(
        y, {"side_info": spec, "identity": base}, grid,
        _solve_options(cfg), seed=cfg.seed, folds=cfg.folds,
        test_fraction=cfg.test_fraction,
    )
    if cfg.report_out:
        names = sorted(results)
        metrics = sorted({k for r in results.values() for k in r.metrics})
        rows = ["variant,lam," + ",".join(metrics)]
        for name in names:
            r = results[name]
            rows.append(",".join([name, repr(r.lam)]
                                 + [repr(r.metrics.get(m)) for m in metrics]))
        mio.atomic_write(cfg.report_out, "\n".join(rows) + "\n")
    return 0


def _build_identity_variant(cfg: RunConfig, y):
    import copy

    plain = copy.copy(cfg)
    plain.row_metric = "identity"
    plain.col_metric = "identity"
    return _build_model_spec(plain, y, lam_gamma=1.0)


def cmd_synth(cfg: RunConfig):
    sspec = SyntheticSpec(
        n_rows=cfg.n, n_cols=cfg.m, rank=cfg.rank,
        entries_per_row=cfg.entries_per_row, loss=_loss_from_config(cfg),
        factor_scale=cfg.factor_scale, seed=cfg.seed,
    )
    y, truth = generate_synthetic(sspec)
    mio.write_observations(y, cfg.out, fmt=cfg.format or mio.TRIPLET_CSV)
    if cfg.truth_out:
        np.savez(cfg.truth_out, u=truth.u, v=truth.v)
    return 0


def cmd_dummies(cfg: RunConfig):
    with open(cfg.input) as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header:
            raise DataError(f"{cfg.input}: empty file")
        try:
            col_idx = header.index(cfg.column)
        except ValueError:
            raise ConfigError(
                f"column {cfg.column!r} not in header {header}"
            ) from None
        ids, cats = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                ids.append(int(row[0]))
            except ValueError as e:
                raise DataError(f"{cfg.input}:{lineno}: {e}") from None
            cats.append(row[col_idx])
    levels = sorted(set(cats))
    out = [",".join([header[0]] + [f"{cfg.column}={lv}" for lv in levels])]
    for i, c in zip(ids, cats):
        out.append(",".join([str(i)] + ["1" if c == lv else "0" for lv in levels]))
    mio.atomic_write(cfg.out, "\n".join(out) + "\n")
    return 0


_COMMANDS = {
    "fit": cmd_fit,
    "predict": cmd_predict,
    "path": cmd_path,
    "cv": cmd_cv,
    "ablate": cmd_ablate,
    "synth": cmd_synth,
    "dummies": cmd_dummies,
}


def run(cfg: RunConfig) -> int:
    return _COMMANDS[cfg.command](cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(config_from_args(args))
    except MatcompError as e:
        print(f"error [{e.category}]: {e}", file=sys.stderr)
        return EXIT_CODES.get(e.category, 2)
    except OSError as e:
        print(f"error [data]: {e}", file=sys.stderr)
        return EXIT_CODES["data"]


if __name__ == "__main__":
    sys.exit(main())
