"""Block proximal gradient descent over (offsets, G2, G3, G1).

Smooth blocks take gradient steps at analytically safe step sizes; the
penalized block G1 takes a proximal step whose soft-thresholded SVD is
computed by warm-started subspace iteration on the implicit prox target
(low-rank plus metric-sandwiched sparse gradient).  A Frank-Wolfe
baseline for the nuclear-ball-constrained problem is included for
benchmarking.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DivergenceError, PredictionError
from .losses import curvature, loss_gradient_sparse, loss_value, validate_responses
from .model import (
    Gamma1,
    ModelSpec,
    ModelState,
    check_state,
    effective_gradient_op,
    gather_product,
    interaction_factors,
    margin_offsets,
    theta_on_omega,
    zero_state,
)
from .operators import ObservedMatrix, add, compose, low_rank, scale, sparse
from .svd import WarmBasis, soft_threshold_svd, subspace_svd

SUFFICIENT_DECREASE = 1e-4


@dataclass
class SolveOptions:
    max_outer_iterations: int = 500
    time_budget: float = math.inf        # seconds
    rel_tol: float = 1e-8                # relative objective change
    step_mode: str = "fixed"             # "fixed" or "backtracking"
    step_size: float | None = None       # explicit G1 step override
    gamma1_step_tol: float | None = None  # extra stop rule: Frobenius move of G1
    svd_tol_floor: float | None = None   # inner tolerance floor (default from rel_tol)
    svd_max_iter: int = 100
    warm_starts: bool = True
    final_polish: bool = False           # exact offset ridge solve (Gaussian only)
    seed: int = 0
    trace_every: int = 25                # FW nuclear-norm instrumentation stride

    def __post_init__(self):
        if self.rel_tol <= 0:
            raise ConfigError("rel_tol must be positive")
        if self.max_outer_iterations < 1 or self.time_budget <= 0:
            raise ConfigError("iteration and time budgets must be positive")
        if self.step_mode not in ("fixed", "backtracking"):
            raise ConfigError("step_mode must be 'fixed' or 'backtracking'")


@dataclass
class TraceRow:
    iteration: int
    seconds: float
    objective: float
    rank: int
    svd_iterations: int
    step: float


@dataclass
class FitTrace:
    rows: list = field(default_factory=list)
    converged: bool = False
    stop_reason: str = ""
    svd_failures: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def objectives(self):
        return np.array([r.objective for r in self.rows])

    def seconds(self):
        return np.array([r.seconds for r in self.rows])

    def total_svd_iterations(self):
        return int(sum(r.svd_iterations for r in self.rows))


def _svd_tol(rel_change, opts: SolveOptions):
    # looser early, 1e-7 floor by default; fixed-point studies can push
    # the floor down via svd_tol_floor
    floor = 1e-7 if opts.svd_tol_floor is None else opts.svd_tol_floor
    if rel_change is None:
        return 1e-7
    return min(1e-7, max(0.01 * abs(rel_change), floor))


def _penalty(spec: ModelSpec, state: ModelState):
    nn = state.gamma1.nuclear_norm()
    val = spec.lam_gamma * nn if nn > 0 else 0.0
    if state.alpha.size:
        val += 0.5 * spec.lam_alpha * float(state.alpha @ state.alpha)
    if state.beta.size:
        val += 0.5 * spec.lam_beta * float(state.beta @ state.beta)
    return val


def _factored_inner(a1, b1, a2, b2):
    # <a1 b1', a2 b2'> without forming either product
    if a1.shape[1] == 0 or a2.shape[1] == 0:
        return 0.0
    return float(np.sum((a1.T @ a2) * (b1.T @ b2)))


def _gamma1_move(old: Gamma1, new: Gamma1):
    """Frobenius distance between two factored blocks."""
    ao, bo = old.left * old.values[None, :], old.right
    an, bn = new.left * new.values[None, :], new.right
    sq = (
        _factored_inner(ao, bo, ao, bo)
        + _factored_inner(an, bn, an, bn)
        - 2.0 * _factored_inner(ao, bo, an, bn)
    )
    return math.sqrt(max(sq, 0.0))


class _OffsetStepper:
    """Majorized gradient steps for mu, alpha, beta.

    Intercept blocks have an exactly diagonal Hessian, bounded per
    coordinate by curvature * count + ridge, so they take a diagonally
    scaled step (exact Newton for Gaussian).  Feature blocks use the
    scalar bound curvature * lam_max(X' diag(count) X) + ridge.
    """

    def __init__(self, spec: ModelSpec, y: ObservedMatrix, curv):
        self.spec = spec
        self.y = y
        self.curv = curv
        self.l_mu = curv * y.nnz
        self.scale_alpha = self._margin_scale("row")
        self.scale_beta = self._margin_scale("col")

    def _margin_scale(self, side):
        spec, y, c = self.spec, self.y, self.curv
        effects = spec.row_effects if side == "row" else spec.col_effects
        lam = spec.lam_alpha if side == "row" else spec.lam_beta
        counts = y.row_counts() if side == "row" else y.col_counts()
        if effects == "none":
            return None
        if effects == "intercept":
            denom = c * counts + lam
            step = np.zeros(denom.size)
            np.divide(1.0, denom, out=step, where=denom > 0)
            return step
        feats = spec.row_features if side == "row" else spec.col_features
        gram = feats.T @ (feats * counts[:, None])
        return 1.0 / (c * float(np.linalg.eigvalsh(gram).max()) + lam)

    def step_all(self, state: ModelState, th_off, theta_rest):
        """One majorized step per enabled offset block; returns updated th_off."""
        spec, y = self.spec, self.y
        if spec.intercept:
            gv = spec.loss.psi_prime(th_off + theta_rest) - y.values
            d_mu = -float(gv.sum()) / self.l_mu
            state.mu += d_mu
            th_off = th_off + d_mu
        if spec.row_effects != "none":
            gv = spec.loss.psi_prime(th_off + theta_rest) - y.values
            sums = np.bincount(y.rows, weights=gv, minlength=spec.n_rows)
            if spec.row_effects == "intercept":
                grad = sums + spec.lam_alpha * state.alpha
                delta_row = -grad * self.scale_alpha
                state.alpha = state.alpha + delta_row
            else:
                grad = spec.row_features.T @ sums + spec.lam_alpha * state.alpha
                state.alpha = state.alpha - grad * self.scale_alpha
                delta_row = spec.row_features @ (-grad * self.scale_alpha)
            th_off = th_off + delta_row[y.rows]
        if spec.col_effects != "none":
            gv = spec.loss.psi_prime(th_off + theta_rest) - y.values
            sums = np.bincount(y.cols, weights=gv, minlength=spec.n_cols)
            if spec.col_effects == "intercept":
                grad = sums + spec.lam_beta * state.beta
                delta_col = -grad * self.scale_beta
                state.beta = state.beta + delta_col
            else:
                grad = spec.col_features.T @ sums + spec.lam_beta * state.beta
                state.beta = state.beta - grad * self.scale_beta
                delta_col = spec.col_features @ (-grad * self.scale_beta)
            th_off = th_off + delta_col[y.cols]
        return th_off


def _offsets_on_omega(spec, state, y):
    row_off, col_off = margin_offsets(spec, state)
    base = state.mu if spec.intercept else 0.0
    return base + row_off[y.rows] + col_off[y.cols]


def _gamma2_theta(spec, state, y):
    if state.gamma2 is None or not state.gamma2.shape[0]:
        return np.zeros(y.nnz)
    rb = spec.row_margin.map_out(spec.row_margin.metric.null_basis)
    cb = spec.col_margin.map_out(state.gamma2.T)
    return gather_product(rb, cb, y.rows, y.cols)


def _gamma3_theta(spec, state, y):
    if state.gamma3 is None or not state.gamma3.shape[1]:
        return np.zeros(y.nnz)
    rb = spec.row_margin.map_out(state.gamma3)
    cb = spec.col_margin.map_out(spec.col_margin.metric.null_basis)
    return gather_product(rb, cb, y.rows, y.cols)


def _gamma1_theta(spec, state, y):
    if not state.gamma1.rank:
        return np.zeros(y.nnz)
    rm, cm = spec.row_margin, spec.col_margin
    rb = rm.map_out(rm.metric.apply_pinv(state.gamma1.left) * state.gamma1.values[None, :])
    cb = cm.map_out(cm.metric.apply_pinv(state.gamma1.right))
    return gather_product(rb, cb, y.rows, y.cols)


def fit_proximal(spec: ModelSpec, y: ObservedMatrix, opts: SolveOptions | None = None,
                 init: ModelState | None = None):
    """Fit by block proximal gradient descent; returns (state, trace).

    Problems with more columns than rows are solved transposed (the
    states returned are always in the caller's orientation).
    """
    opts = opts or SolveOptions()
    if y.shape != spec.shape:
        raise ConfigError(f"observations are {y.shape}, spec is {spec.shape}")
    validate_responses(spec.loss, y)
    if spec.n_cols > spec.n_rows:
        state, trace = _fit_proximal(
            spec.transposed(), y.transposed(), opts,
            None if init is None else init.transposed(),
        )
        return state.transposed(), trace
    return _fit_proximal(spec, y, opts, init)


def _fit_proximal(spec, y, opts, init):
    t_start = time.perf_counter()
    state = init if init is not None else zero_state(spec)
    check_state(spec, state)
    state = ModelState(state.mu, state.alpha.copy(), state.beta.copy(),
                       Gamma1(state.gamma1.left, state.gamma1.values, state.gamma1.right),
                       None if state.gamma2 is None else state.gamma2.copy(),
                       None if state.gamma3 is None else state.gamma3.copy(),
                       state.warm)

    rm, cm = spec.row_margin, spec.col_margin
    curv = curvature(spec.loss)
    stepper = _OffsetStepper(spec, y, curv)
    pn, qn = rm.metric.pinv_norm(), cm.metric.pinv_norm()
    gamma1_active = pn > 0 and qn > 0 and math.isfinite(spec.lam_gamma)
    l_g1 = curv * (pn * qn) ** 2 if gamma1_active else None
    if opts.step_size is not None:
        t1 = float(opts.step_size)
    elif gamma1_active:
        t1 = 1.0 / l_g1
    else:
        t1 = 0.0
    backtracking = opts.step_mode == "backtracking"
    if backtracking and gamma1_active:
        t1 = 1.0 / curv

    k_p = rm.metric.null_dim
    k_q = cm.metric.null_dim

    th_off = _offsets_on_omega(spec, state, y)
    th_g1 = _gamma1_theta(spec, state, y)
    th_g2 = _gamma2_theta(spec, state, y)
    th_g3 = _gamma3_theta(spec, state, y)

    trace = FitTrace()
    obj = loss_value(spec.loss, th_off + th_g1 + th_g2 + th_g3, y) + _penalty(spec, state)
    rel_change = None
    rank_guess = max(state.gamma1.rank + 2, 10)

    for k in range(opts.max_outer_iterations):
        inner_total = 0
        step_used = t1

        # smooth blocks first: offsets, then the unpenalized null blocks
        th_off = stepper.step_all(state, th_off, th_g1 + th_g2 + th_g3)

        if k_p:
            gv = spec.loss.psi_prime(th_off + th_g1 + th_g2 + th_g3) - y.values
            eff = effective_gradient_op(spec, y.with_values(gv))
            grad2 = eff.apply_adjoint(rm.metric.null_basis).T
            state.gamma2 = state.gamma2 - grad2 / curv
            th_g2 = _gamma2_theta(spec, state, y)
        if k_q:
            gv = spec.loss.psi_prime(th_off + th_g1 + th_g2 + th_g3) - y.values
            eff = effective_gradient_op(spec, y.with_values(gv))
            grad3 = eff.apply(cm.metric.null_basis)
            state.gamma3 = state.gamma3 - grad3 / curv
            if k_p:
                # the doubly-null corner is representable in both blocks;
                # keep it in gamma2 so the flat direction cannot wander
                corner = rm.metric.null_basis.T @ state.gamma3
                if np.any(corner):
                    state.gamma3 = state.gamma3 - rm.metric.null_basis @ corner
                    state.gamma2 = state.gamma2 + corner @ cm.metric.null_basis.T
                    th_g2 = _gamma2_theta(spec, state, y)
            th_g3 = _gamma3_theta(spec, state, y)

        gamma1_move = 0.0
        if gamma1_active:
            theta_rest = th_off + th_g2 + th_g3
            gv = spec.loss.psi_prime(theta_rest + th_g1) - y.values
            eff = effective_gradient_op(spec, y.with_values(gv))
            grad_op = compose(rm.metric.pinv_op(), eff, cm.metric.pinv_op())
            inner_tol = _svd_tol(rel_change, opts)
            warm = state.warm if opts.warm_starts else None
            seed = opts.seed + k

            def prox(step):
                g1 = state.gamma1
                parts = []
                if g1.rank:
                    parts.append(low_rank(g1.left * g1.values[None, :], g1.right))
                parts.append(scale(-step, grad_op))
                target = add(*parts)
                res = soft_threshold_svd(
                    target, spec.lam_gamma * step, rank_guess=rank_guess,
                    warm=warm, tol=inner_tol, max_iter=opts.svd_max_iter, seed=seed,
                )
                if not res.converged:
                    trace.svd_failures.append(k)
                    res = soft_threshold_svd(
                        target, spec.lam_gamma * step, rank_guess=rank_guess,
                        warm=res.warm, tol=inner_tol,
                        max_iter=2 * opts.svd_max_iter, seed=seed,
                    )
                return res

            if backtracking:
                loss_cur = loss_value(spec.loss, theta_rest + th_g1, y)
                f_cur = loss_cur + spec.lam_gamma * state.gamma1.nuclear_norm()
                while True:
                    res = prox(t1)
                    inner_total += res.inner_iterations
                    new_g1 = Gamma1(res.left, res.values, res.right)
                    move = _gamma1_move(state.gamma1, new_g1)
                    th_new = _gamma1_theta(spec, ModelState(
                        state.mu, state.alpha, state.beta, new_g1,
                        state.gamma2, state.gamma3), y)
                    f_new = (loss_value(spec.loss, theta_rest + th_new, y)
                             + spec.lam_gamma * float(res.values.sum()))
                    if (move < 1e-14
                            or f_new <= f_cur - SUFFICIENT_DECREASE / t1 * move ** 2
                            or t1 < 1e-12 / curv):
                        step_used = t1
                        t1 = min(2.0 * t1, 1e3 / curv)
                        break
                    t1 *= 0.5
            else:
                res = prox(t1)
                inner_total += res.inner_iterations
                new_g1 = Gamma1(res.left, res.values, res.right)
                move = _gamma1_move(state.gamma1, new_g1)
                th_new = _gamma1_theta(spec, ModelState(
                    state.mu, state.alpha, state.beta, new_g1,
                    state.gamma2, state.gamma3), y)
                step_used = t1

            gamma1_move = move
            state.gamma1 = new_g1
            state.warm = res.warm
            th_g1 = th_new
            rank_guess = max(state.gamma1.rank + 2, 10)

        new_obj = (loss_value(spec.loss, th_off + th_g1 + th_g2 + th_g3, y)
                   + _penalty(spec, state))
        elapsed = time.perf_counter() - t_start
        trace.rows.append(TraceRow(k, elapsed, new_obj, state.gamma1.rank,
                                   inner_total, step_used))
        if not math.isfinite(new_obj):
            raise DivergenceError(
                f"objective became non-finite at iteration {k} (gamma1 step {step_used:g})"
            )
        rel_change = (obj - new_obj) / max(1.0, abs(obj))
        obj = new_obj
        if abs(rel_change) < opts.rel_tol and (
            opts.gamma1_step_tol is None or gamma1_move <= opts.gamma1_step_tol
        ):
            trace.converged = True
            trace.stop_reason = "tolerance"
            break
        if elapsed > opts.time_budget:
            trace.stop_reason = "time_budget"
            break
    else:
        trace.stop_reason = "max_iterations"

    if opts.final_polish and spec.loss.kind == "gaussian":
        _polish_offsets_gaussian(spec, state, y)
        th_off = _offsets_on_omega(spec, state, y)
        final = (loss_value(spec.loss, th_off + th_g1 + th_g2 + th_g3, y)
                 + _penalty(spec, state))
        trace.rows.append(TraceRow(len(trace.rows), time.perf_counter() - t_start,
                                   final, state.gamma1.rank, 0, 0.0))
    return state, trace


def _polish_offsets_gaussian(spec, state, y):
    """Exact ridge solve for (mu, alpha, beta) with the interaction fixed."""
    cols = []
    ridge = []
    nnz = y.nnz
    if spec.intercept:
        cols.append(sp.csr_matrix(np.ones((nnz, 1))))
        ridge.append(np.zeros(1))
    if spec.row_effects == "intercept":
        cols.append(sp.csr_matrix((np.ones(nnz), (np.arange(nnz), y.rows)),
                                  shape=(nnz, spec.n_rows)))
        ridge.append(np.full(spec.n_rows, spec.lam_alpha))
    elif spec.row_effects == "features":
        cols.append(sp.csr_matrix(spec.row_features[y.rows]))
        ridge.append(np.full(spec.row_features.shape[1], spec.lam_alpha))
    if spec.col_effects == "intercept":
        cols.append(sp.csr_matrix((np.ones(nnz), (np.arange(nnz), y.cols)),
                                  shape=(nnz, spec.n_cols)))
        ridge.append(np.full(spec.n_cols, spec.lam_beta))
    elif spec.col_effects == "features":
        cols.append(sp.csr_matrix(spec.col_features[y.cols]))
        ridge.append(np.full(spec.col_features.shape[1], spec.lam_beta))
    if not cols:
        return
    design = sp.hstack(cols, format="csr")
    resid = y.values - (_gamma1_theta(spec, state, y)
                        + _gamma2_theta(spec, state, y)
                        + _gamma3_theta(spec, state, y))
    gram = (design.T @ design).toarray() + np.diag(np.concatenate(ridge))
    rhs = design.T @ resid
    sol, *_ = np.linalg.lstsq(gram, rhs, rcond=None)
    i = 0
    if spec.intercept:
        state.mu = float(sol[0])
        i = 1
    na = spec.offset_dim("row")
    state.alpha = sol[i:i + na]
    i += na
    nb = spec.offset_dim("col")
    state.beta = sol[i:i + nb]


def fit_frank_wolfe(spec: ModelSpec, y: ObservedMatrix, delta,
                    opts: SolveOptions | None = None):
    """Conditional gradient on the nuclear ball {||G||_* <= delta}.

    Baseline scope: identity metrics, no column transform.  The trace
    objective is the constrained loss; exact nuclear norms of the iterate
    are recorded every `opts.trace_every` iterations in
    trace.extras["nuclear_norm"] (desk-scale instrumentation).
    """
    opts = opts or SolveOptions()
    delta = float(delta)
    if delta < 0:
        raise ConfigError("constraint radius must be nonnegative")
    if not (spec.row_margin.metric.is_identity and spec.col_margin.metric.is_identity
            and spec.row_margin.transform is None and spec.col_margin.transform is None):
        raise ConfigError("frank-wolfe baseline supports identity metrics only")
    validate_responses(spec.loss, y)
    if spec.n_cols > spec.n_rows:
        state, trace = _fit_frank_wolfe(spec.transposed(), y.transposed(), delta, opts)
        return state.transposed(), trace
    return _fit_frank_wolfe(spec, y, delta, opts)


def _fit_frank_wolfe(spec, y, delta, opts):
    t_start = time.perf_counter()
    state = zero_state(spec)
    stepper = _OffsetStepper(spec, y, curvature(spec.loss))
    gamma = np.zeros(spec.shape)
    trace = FitTrace()
    trace.extras["nuclear_norm"] = []
    trace.extras["fw_gap"] = []
    warm = None
    obj = None
    for k in range(opts.max_outer_iterations):
        th_gamma = gamma[y.rows, y.cols]
        th_off = _offsets_on_omega(spec, state, y)
        th_off = stepper.step_all(state, th_off, th_gamma)

        gv = spec.loss.psi_prime(th_off + th_gamma) - y.values
        g_op = sparse(y.with_values(gv))
        res = subspace_svd(g_op, 1, warm=warm, tol=1e-7,
                           max_iter=opts.svd_max_iter, seed=opts.seed + k,
                           oversample=4)
        warm = WarmBasis(res.left, 1)
        s1 = float(res.singular_values[0])
        gap = float(gv @ th_gamma) + delta * s1
        eta = 2.0 / (k + 2.0)
        gamma *= 1.0 - eta
        if delta > 0:
            gamma -= (eta * delta) * np.outer(res.left[:, 0], res.right[:, 0])

        th_gamma = gamma[y.rows, y.cols]
        new_obj = loss_value(spec.loss, th_off + th_gamma, y)
        elapsed = time.perf_counter() - t_start
        if k % opts.trace_every == 0 or k == opts.max_outer_iterations - 1:
            sv = np.linalg.svd(gamma, compute_uv=False)
            trace.extras["nuclear_norm"].append((k, float(sv.sum())))
            rank = int((sv > 1e-10 * max(sv[0], 1e-300)).sum())
        else:
            rank = trace.rows[-1].rank if trace.rows else 0
        trace.extras["fw_gap"].append(gap)
        trace.rows.append(TraceRow(k, elapsed, new_obj, rank,
                                   res.inner_iterations, eta))
        if not math.isfinite(new_obj):
            raise DivergenceError(f"objective became non-finite at FW iteration {k}")
        if obj is not None and gap <= opts.rel_tol * max(1.0, abs(new_obj)):
            trace.converged = True
            trace.stop_reason = "tolerance"
            break
        obj = new_obj
        if elapsed > opts.time_budget:
            trace.stop_reason = "time_budget"
            break
    else:
        trace.stop_reason = "max_iterations"

    u, s, vt = np.linalg.svd(gamma, full_matrices=False)
    keep = s > 1e-12 * max(float(s[0]) if s.size else 0.0, 1e-300)
    state.gamma1 = Gamma1(u[:, keep], s[keep], vt[keep].T)
    return state, trace


def predict(spec: ModelSpec, state: ModelState, pairs):
    """Natural-parameter and mean-scale predictions at (row, col) pairs."""
    pairs = np.asarray(pairs, dtype=np.int64)
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise PredictionError("pairs must be a (k, 2) integer array")
    rows, cols = pairs[:, 0], pairs[:, 1]
    for idx, hi, what in ((rows, spec.n_rows, "row"), (cols, spec.n_cols, "column")):
        bad = (idx < 0) | (idx >= hi)
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise PredictionError(
                f"{what} index {idx[k]} outside the trained range [0, {hi})"
            )
    check_state(spec, state)
    row_off, col_off = margin_offsets(spec, state)
    rb, cb = interaction_factors(spec, state)
    theta = np.full(rows.size, state.mu if spec.intercept else 0.0)
    theta += row_off[rows] + col_off[cols]
    theta += gather_product(rb, cb, rows, cols)
    return theta, spec.loss.psi_prime(theta)


def fit_null_model(spec: ModelSpec, y: ObservedMatrix, opts: SolveOptions | None = None):
    """Fit with the penalized block forced to zero (offsets + null blocks only)."""
    null_spec = replace(spec, lam_gamma=math.inf)
    state, trace = fit_proximal(null_spec, y, opts)
    return state, trace


def lambda_max(spec: ModelSpec, y: ObservedMatrix, opts: SolveOptions | None = None):
    """Smallest penalty at which the fitted G1 is exactly zero.

    Computed as the top singular value of the metric-sandwiched loss
    gradient at the G1 = 0 optimum.
    """
    opts = opts or SolveOptions(rel_tol=1e-10, max_outer_iterations=2000)
    state, _ = fit_null_model(spec, y, opts)
    theta = theta_on_omega(spec, state, y)
    g = loss_gradient_sparse(spec.loss, theta, y)
    eff = effective_gradient_op(spec, g)
    grad_op = compose(spec.row_margin.metric.pinv_op(), eff,
                      spec.col_margin.metric.pinv_op())
    n, m = grad_op.shape
    res = subspace_svd(grad_op, 1, tol=1e-9, max_iter=300, seed=opts.seed,
                       oversample=min(6, min(n, m) - 1))
    return float(res.singular_values[0])
