"""Experiment harness: synthetic generators, splits, regularization paths,
cross-validation, and paired side-information ablations at desk scale.

The generators mirror the structure of the large benchmark instances
(logistic low-rank interactions; group-structured row factors; sparsely
sampled smooth curves) at sizes that run in seconds to minutes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DataError
from .losses import Loss, unit_deviance
from .model import ModelSpec, theta_on_omega, objective
from .operators import ObservedMatrix
from .sideinfo import nested_spline_bases
from .solver import SolveOptions, fit_null_model, fit_proximal

BERNOULLI = "bernoulli"
GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class SyntheticSpec:
    """Low-rank exponential-family generator; defaults are the desk-scale
    stand-in for the large synthetic benchmark (its shape, scaled down)."""

    n_rows: int = 1000
    n_cols: int = 800
    rank: int = 10
    entries_per_row: int = 40
    loss: Loss = Loss.bernoulli()
    factor_scale: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.rank > min(self.n_rows, self.n_cols):
            raise ConfigError("rank exceeds min(n_rows, n_cols)")
        if self.entries_per_row > self.n_cols:
            raise ConfigError("entries_per_row exceeds n_cols")


@dataclass
class LowRankTruth:
    u: np.ndarray
    v: np.ndarray

    def theta(self, rows, cols):
        return np.einsum("ij,ij->i", self.u[rows], self.v[cols])

    def theta_dense(self):
        return self.u @ self.v.T


def _sample_omega(rng, n_rows, n_cols, per_row):
    # distinct columns per row, uniform; desk-scale memory (n_rows x n_cols)
    idx = np.argsort(rng.random((n_rows, n_cols)), axis=1)[:, :per_row]
    rows = np.repeat(np.arange(n_rows), per_row)
    return rows, idx.ravel()


def _draw_responses(rng, loss: Loss, theta):
    if loss.kind == GAUSSIAN:
        return theta + rng.standard_normal(theta.size)
    if loss.kind == BERNOULLI:
        return (rng.random(theta.size) < expit(theta)).astype(np.float64)
    return rng.poisson(np.exp(theta)).astype(np.float64)


def generate_synthetic(spec: SyntheticSpec):
    """Sample (observations, ground-truth factors) from the low-rank model."""
    rng = np.random.default_rng(spec.seed)
    s = spec.factor_scale / np.sqrt(spec.rank)
    u = s * rng.standard_normal((spec.n_rows, spec.rank))
    v = s * rng.standard_normal((spec.n_cols, spec.rank))
    rows, cols = _sample_omega(rng, spec.n_rows, spec.n_cols, spec.entries_per_row)
    truth = LowRankTruth(u, v)
    yvals = _draw_responses(rng, spec.loss, truth.theta(rows, cols))
    return ObservedMatrix(spec.n_rows, spec.n_cols, rows, cols, yvals), truth


def generate_grouped(n_rows=120, n_cols=90, n_groups=8, rank=4, entries_per_row=10,
                     group_sd=1.0, within_sd=0.35, col_sd=0.7, seed=0):
    """Logistic data whose row factors cluster by group.

    Returns (observations, group dummy features, noise dummy features,
    truth).  The noise features are dummies of an independently permuted
    grouping: same shape and sparsity, no relation to the factors.
    """
    rng = np.random.default_rng(seed)
    groups = rng.integers(0, n_groups, size=n_rows)
    eta = group_sd * rng.standard_normal((n_groups, rank))
    u = eta[groups] + within_sd * rng.standard_normal((n_rows, rank))
    v = col_sd * rng.standard_normal((n_cols, rank))
    rows, cols = _sample_omega(rng, n_rows, n_cols, entries_per_row)
    truth = LowRankTruth(u, v)
    yvals = _draw_responses(rng, Loss.bernoulli(), truth.theta(rows, cols))
    x_true = np.eye(n_groups)[groups]
    noise_groups = rng.permutation(groups)
    x_noise = np.eye(n_groups)[noise_groups]
    y = ObservedMatrix(n_rows, n_cols, rows, cols, yvals)
    return y, x_true, x_noise, truth


@dataclass
class FunctionalTruth:
    theta: np.ndarray       # n_curves x grid_size
    grid: np.ndarray
    coarse_basis: np.ndarray
    fine_basis: np.ndarray


def generate_functional(n_curves=200, grid_size=256, samples_per_curve=26,
                        latent_rank=3, noise_sd=0.5, signal_sd=1.5,
                        df_coarse=4, df_fine=12, seed=0):
    """Sparsely sampled smooth curves: a shared mean plus a few smooth
    components, all inside the df_fine natural-spline span, with Gaussian
    observation noise."""
    rng = np.random.default_rng(seed)
    grid = np.arange(grid_size, dtype=np.float64)
    pair = nested_spline_bases(grid, df_coarse, df_fine)
    fine, coarse = pair.fine, pair.coarse
    qf, _ = np.linalg.qr(fine)
    mean_curve = qf @ rng.standard_normal(df_fine)
    comp_coefs, _ = np.linalg.qr(rng.standard_normal((df_fine, latent_rank)))
    comps = qf @ comp_coefs
    scores = rng.standard_normal((n_curves, latent_rank)) * np.array(
        [1.0 / np.sqrt(k + 1) for k in range(latent_rank)]
    )
    theta = mean_curve[None, :] + scores @ comps.T
    theta *= signal_sd / theta.std()
    rows, cols = _sample_omega(rng, n_curves, grid_size, samples_per_curve)
    yvals = theta[rows, cols] + noise_sd * rng.standard_normal(rows.size)
    y = ObservedMatrix(n_curves, grid_size, rows, cols, yvals)
    return y, FunctionalTruth(theta, grid, coarse, fine)


def split(y: ObservedMatrix, fraction, seed):
    """Entrywise random partition into (train, test); both keep the full
    dimensions.  A side that would come out empty is topped up with one
    entry, so rows/columns may lose all their training entries but the
    parts never vanish."""
    fraction = float(fraction)
    if not 0.0 < fraction < 1.0:
        raise ConfigError("split fraction must be in (0, 1)")
    if y.nnz < 2:
        raise DataError("need at least two observed entries to split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(y.nnz)
    k = int(round(fraction * y.nnz))
    k = min(max(k, 1), y.nnz - 1)
    mask = np.zeros(y.nnz, dtype=bool)
    mask[perm[:k]] = True
    return y.subset(mask), y.subset(~mask)


def fold_assignments(nnz, folds, seed):
    if folds < 2:
        raise ConfigError("need at least 2 folds")
    if nnz < folds:
        raise DataError("fewer observed entries than folds")
    rng = np.random.default_rng(seed)
    return rng.permutation(np.arange(nnz) % folds)


@dataclass
class EvalPoint:
    lam: float
    train_objective: float
    rank: int
    seconds: float
    converged: bool
    test_deviance: float | None = None
    test_mse: float | None = None
    test_misclass: float | None = None
    test_logloss: float | None = None


def evaluate(spec: ModelSpec, state, test: ObservedMatrix):
    """Held-out metrics, computed strictly from the test entries."""
    theta = theta_on_omega(spec, state, test)
    out = {"test_deviance": float(np.mean(unit_deviance(spec.loss, theta, test.values)))}
    if spec.loss.kind == GAUSSIAN:
        out["test_mse"] = float(np.mean((test.values - theta) ** 2))
    if spec.loss.kind == BERNOULLI:
        p = spec.loss.psi_prime(theta)
        out["test_misclass"] = float(np.mean((p >= 0.5) != (test.values >= 0.5)))
        out["test_logloss"] = float(np.mean(spec.loss.psi(theta) - test.values * theta))
    return out


def default_lambda_grid(lam_max, n_points=8, min_ratio=0.01):
    """Descending logarithmic grid from just under lam_max."""
    return list(np.exp(np.linspace(np.log(0.95 * lam_max),
                                   np.log(min_ratio * lam_max), n_points)))


def lambda_path(base_spec: ModelSpec, y: ObservedMatrix, grid,
                opts: SolveOptions | None = None, test: ObservedMatrix | None = None,
                warm_start=True, collect_traces=False):
    """Fit a descending sequence of penalties, warm-starting along the way."""
    grid = [float(g) for g in grid]
    if any(g <= 0 for g in grid):
        raise ConfigError("lambda grid must be positive")
    if any(a <= b for a, b in zip(grid, grid[1:])):
        raise ConfigError("lambda grid must be strictly descending")
    points, states, traces = [], [], []
    state = None
    for lam in grid:
        spec_k = replace(base_spec, lam_gamma=lam)
        t0 = time.perf_counter()
        st, tr = fit_proximal(spec_k, y, opts, init=state if warm_start else None)
        seconds = time.perf_counter() - t0
        state = st
        metrics = evaluate(spec_k, st, test) if test is not None else {}
        points.append(EvalPoint(
            lam=lam,
            train_objective=objective(spec_k, st, y),
            rank=st.gamma1.rank,
            seconds=seconds,
            converged=tr.converged,
            **metrics,
        ))
        states.append(st)
        if collect_traces:
            traces.append(tr)
    if collect_traces:
        return points, states, traces
    return points, states


@dataclass
class CvResult:
    lam: float
    grid: list
    mean_deviance: np.ndarray
    fold_deviance: np.ndarray
    points: list
    state: object
    spec: ModelSpec


def cross_validate(base_spec: ModelSpec, y: ObservedMatrix, folds, grid,
                   opts: SolveOptions | None = None, seed=0) -> CvResult:
    """Entrywise K-fold CV over a penalty grid; refits the winner on all data."""
    ids = fold_assignments(y.nnz, folds, seed)
    grid = [float(g) for g in grid]
    dev = np.zeros((folds, len(grid)))
    for f in range(folds):
        train = y.subset(ids != f)
        test = y.subset(ids == f)
        pts, _ = lambda_path(base_spec, train, grid, opts, test=test)
        dev[f] = [p.test_deviance for p in pts]
    mean_dev = dev.mean(axis=0)
    j = int(np.argmin(mean_dev))
    points, states = lambda_path(base_spec, y, grid[: j + 1], opts)
    return CvResult(
        lam=grid[j], grid=grid, mean_deviance=mean_dev, fold_deviance=dev,
        points=points, state=states[-1],
        spec=replace(base_spec, lam_gamma=grid[j]),
    )


@dataclass
class AblationResult:
    name: str
    lam: float
    metrics: dict
    cv: CvResult


def side_info_ablation(y: ObservedMatrix, variants: dict, grid,
                       opts: SolveOptions | None = None, seed=0,
                       folds=3, test_fraction=0.2):
    """Fit each spec variant on an identical split with identical CV folds;
    report held-out metrics per variant for paired comparison."""
    train, test = split(y, 1.0 - test_fraction, seed)
    results = {}
    for name, spec in variants.items():
        cv = cross_validate(spec, train, folds, grid, opts, seed=seed)
        metrics = evaluate(cv.spec, cv.state, test)
        results[name] = AblationResult(name, cv.lam, metrics, cv)
    return results


def select_offset_ridge(base_spec: ModelSpec, y: ObservedMatrix,
                        opts: SolveOptions | None = None, seed=0,
                        points_per_decade=10, decades=4, center=1.0):
    """Optional pre-pass: pick lam_alpha = lam_beta by held-out deviance of
    the offsets-only model (interaction removed) over a log grid."""
    train, test = split(y, 0.8, seed)
    n = points_per_decade * decades
    lams = np.logspace(np.log10(center) - decades / 2,
                       np.log10(center) + decades / 2, n)
    best, best_dev = None, np.inf
    for lam in lams:
        spec_k = replace(base_spec, lam_alpha=float(lam), lam_beta=float(lam))
        state, _ = fit_null_model(spec_k, train, opts)
        dev = evaluate(spec_k, state, test)["test_deviance"]
        if dev < best_dev:
            best, best_dev = float(lam), dev
    return best
