"""Truncated SVD by warm-started block subspace iteration, and the
soft-thresholded SVD that realizes the nuclear-norm proximal map.

The iteration never materializes its target: one sweep costs one block
apply and one block adjoint-apply of the operator.  Warm starts reuse the
left singular subspace from a previous call; across proximal iterations
the subspaces of successive targets drift slowly, so a warm basis cuts
the sweep count substantially.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .operators import LinOp

_TINY = 1e-300


@dataclass
class SvdResult:
    left: np.ndarray
    singular_values: np.ndarray
    right: np.ndarray
    converged: bool
    inner_iterations: int
    working_left: np.ndarray | None = None  # full iterated block incl. buffer


@dataclass
class WarmBasis:
    """Left singular subspace carried between soft-threshold calls."""

    subspace: np.ndarray
    previous_rank: int


def orthonormalize(block, rng=None):
    """Orthonormalize the columns of `block`, preserving their span.

    Columns beyond the numerical rank (R diagonal below 1e-12 relative to
    the largest) are replaced with fresh random directions; the second
    return value flags whether that happened.
    """
    b = np.array(block, dtype=np.float64)
    if b.ndim != 2:
        raise DimensionError("expected a 2-d block")
    n, r = b.shape
    if r == 0:
        return b, False
    if r > n:
        raise DimensionError(f"cannot orthonormalize {r} columns in dimension {n}")
    q, rmat = np.linalg.qr(b)
    diag = np.abs(np.diagonal(rmat))
    flagged = False
    for _ in range(3):
        bad = diag <= 1e-12 * max(float(diag.max(initial=0.0)), 1.0)
        if not bad.any():
            break
        flagged = True
        if rng is None:
            rng = np.random.default_rng(0)
        b[:, bad] = rng.standard_normal((n, int(bad.sum())))
        q, rmat = np.linalg.qr(b)
        diag = np.abs(np.diagonal(rmat))
    return q, flagged


def _fix_signs(u, v):
    # first nonzero coordinate of each left vector made nonnegative, so
    # repeated runs are comparable
    for k in range(u.shape[1]):
        col = u[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-12 * max(float(np.abs(col).max(initial=0.0)), _TINY))
        if nz.size and col[nz[0]] < 0:
            u[:, k] = -col
            v[:, k] = -v[:, k]
    return u, v


def _shrunk_change(u0, s0, v0, u1, s1, v1):
    """Frobenius distance between u0 diag(s0) v0' and u1 diag(s1) v1'."""
    a0, a1 = u0 * s0[None, :], u1 * s1[None, :]
    sq = (float(s0 @ s0) + float(s1 @ s1)
          - 2.0 * float(np.sum((a0.T @ a1) * (v0.T @ v1))))
    return np.sqrt(max(sq, 0.0))


def _geometric_tail(change, change_prev, ratio_floor=0.0):
    """Remaining-error estimate assuming geometric decay of `change`.

    `ratio_floor` guards against transient dips in the change sequence
    being read as fast convergence.
    """
    if change_prev is None or change_prev <= 0.0:
        return np.inf if change > 0.0 else 0.0
    ratio = min(max(change / change_prev, ratio_floor), 0.999)
    if ratio <= 0.0:
        return 0.0
    return change * ratio / (1.0 - ratio)


def subspace_svd(op: LinOp, rank, warm: WarmBasis | None = None, tol=1e-10,
                 max_iter=100, seed=0, oversample=5, soft_threshold=None):
    """Top-`rank` singular triples of `op` by block subspace iteration.

    Each sweep applies op.T to the current left block, orthonormalizes,
    applies op, and re-extracts Rayleigh-Ritz triples from the small
    projected matrix.  A few extra columns are iterated internally so
    that clustered trailing values do not stall the requested ones.

    Convergence in the standalone mode requires both a small relative
    change of the singular values between sweeps and two-sided residuals
    below tol * sigma_1 (by construction ||A v_k - s_k u_k|| is already
    at roundoff after the Ritz rotation; the adjoint residual is the
    binding one).

    When `soft_threshold` is given, the call serves the nuclear prox and
    convergence is instead measured on what the prox keeps: the sweep-to-
    sweep Frobenius change of the shrunk reconstruction
    U (sigma - threshold)_+ V' must fall below tol * sigma_1.  Values at
    or below the threshold are discarded by the prox, so their exact
    placement inside a bulk spectrum is never certified (it can cost
    hundreds of sweeps and cannot affect the output).
    """
    n, m = op.shape
    rank = int(rank)
    if rank < 1 or rank > min(n, m):
        raise ConfigError(f"rank {rank} outside [1, min(n,m)={min(n, m)}]")
    if tol <= 0:
        raise ConfigError("tol must be positive")
    r_work = min(rank + max(int(oversample), 0), min(n, m))
    rng = np.random.default_rng(seed)

    if warm is not None:
        basis = np.asarray(warm.subspace, dtype=np.float64)
        if basis.ndim != 2 or basis.shape[0] != n:
            raise DimensionError("warm basis does not match the operator's row dimension")
        if basis.shape[1] >= r_work:
            basis = basis[:, :r_work]
        else:
            pad = rng.standard_normal((n, r_work - basis.shape[1]))
            basis = np.hstack([basis, pad])
    else:
        basis = rng.standard_normal((n, r_work))
    u, _ = orthonormalize(basis, rng)

    sigma = None
    sigma_prev = None
    shrunk_prev = None
    change_prev = None
    dsig_prev = None
    hits = 0
    v = None
    inner = 0
    converged = False
    for _ in range(max_iter):
        z = op.apply_adjoint(u)  # m x r_work
        inner += 1
        if sigma is not None and soft_threshold is None:
            sig1 = float(sigma[0])
            if sig1 < 1e-14:
                converged = True
                break
            resid = z[:, :rank] - v[:, :rank] * sigma[None, :rank]
            res_norm = np.linalg.norm(resid, axis=0)
            active = sigma[:rank] > tol * sig1
            if sigma_prev is None:
                rel_change = np.inf
            else:
                rel_change = float(
                    np.linalg.norm(sigma[:rank] - sigma_prev[:rank]) / sig1
                )
            if rel_change < tol and np.all(res_norm[active] <= tol * sig1):
                converged = True
                break
        v_new, _ = orthonormalize(z, rng)
        w = op.apply(v_new)  # n x r_work
        q, rmat = np.linalg.qr(w)
        ru, s, rvt = np.linalg.svd(rmat)
        u = q @ ru
        v = v_new @ rvt.T
        sigma_prev = sigma
        sigma = s
        if soft_threshold is not None:
            sig1 = float(sigma[0])
            if sig1 < 1e-14:
                converged = True
                break
            shrunk = np.maximum(sigma - soft_threshold, 0.0)
            if shrunk_prev is not None:
                change = _shrunk_change(u_prev, shrunk_prev, v_prev, u, shrunk, v)
                dsig = float(np.abs(sigma - sigma_prev).max())
                # geometric-tail estimates of the remaining error; the
                # ratio floor keeps transient dips from being mistaken
                # for fast convergence
                rem_out = _geometric_tail(change, change_prev, ratio_floor=0.5)
                rem_sig = _geometric_tail(dsig, dsig_prev, ratio_floor=0.5)
                output_ok = change <= tol * sig1 and rem_out <= tol * sig1
                # drop certificate: no value still rising through the
                # threshold may be discarded uncertified
                dropped = sigma[shrunk == 0.0]
                if dropped.size:
                    top_dropped = float(dropped.max())
                    drop_ok = (top_dropped + rem_sig <= soft_threshold
                               or rem_sig <= tol * sig1)
                else:
                    drop_ok = True
                if shrunk[0] == 0.0:
                    # nothing survives so far; certify that nothing will
                    drop_ok = (sig1 + rem_sig <= soft_threshold
                               or rem_sig <= tol * sig1)
                if output_ok and drop_ok:
                    hits += 1
                    if hits >= 2:  # hysteresis against lucky single sweeps
                        converged = True
                        break
                else:
                    hits = 0
                change_prev = change
                dsig_prev = dsig
            u_prev, v_prev, shrunk_prev = u, v, shrunk

    left = u[:, :rank].copy()
    right = v[:, :rank].copy()
    vals = np.maximum(sigma[:rank].copy(), 0.0)
    left, right = _fix_signs(left, right)
    return SvdResult(left, vals, right, converged, inner, working_left=u)


@dataclass
class SoftThresholdResult:
    left: np.ndarray
    values: np.ndarray          # shrunk singular values, all > 0
    right: np.ndarray
    warm: WarmBasis
    converged: bool
    inner_iterations: int
    computed_rank: int


def soft_threshold_svd(op: LinOp, threshold, rank_guess=10, warm: WarmBasis | None = None,
                       tol=1e-10, max_iter=100, seed=0):
    """Minimizer of 0.5 ||op - G||_F^2 + threshold * ||G||_*, in factored form.

    Runs `subspace_svd` at a working rank and escalates (x2, capped at
    min(n, m)) until the smallest computed singular value falls below the
    threshold, which certifies that no shrunk-away value was missed.
    """
    threshold = float(threshold)
    if threshold < 0:
        raise ConfigError("threshold must be nonnegative")
    n, m = op.shape
    full = min(n, m)
    r = int(min(max(rank_guess, 1), full))
    cur_warm = warm
    total_inner = 0
    while True:
        res = subspace_svd(op, r, warm=cur_warm, tol=tol, max_iter=max_iter,
                           seed=seed, soft_threshold=threshold)
        total_inner += res.inner_iterations
        if r >= full or res.singular_values[-1] <= threshold:
            break
        cur_warm = WarmBasis(res.working_left, r)
        r = min(2 * r, full)
    keep = res.singular_values > threshold
    new_warm = WarmBasis(res.working_left, int(keep.sum()))
    return SoftThresholdResult(
        left=res.left[:, keep],
        values=res.singular_values[keep] - threshold,
        right=res.right[:, keep],
        warm=new_warm,
        converged=res.converged,
        inner_iterations=total_inner,
        computed_rank=r,
    )
