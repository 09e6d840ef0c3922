"""Penalty metrics built from side information.

A `SideMetric` packages the square-root penalty P = (I - H)^(1/2) for a
symmetric PSD smoother H with eigenvalues in [0, 1], together with its
pseudoinverse and null-space basis.  Only H's nontrivial eigenpairs are
stored (computed from small core matrices, never from the full n x n H),
so every derived operator is identity-plus-low-rank.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .operators import LinOp, add, identity, low_rank

# directions this close to d = 1 are treated as exactly unpenalized
NULL_THRESHOLD = 1e-8


@dataclass(frozen=True)
class FeatureMatrix:
    """Dense feature matrix with one row per matrix row (or column)."""

    values: np.ndarray
    labels: tuple = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ConfigError("features must be a 2-d array")
        if not np.isfinite(v).all():
            raise DataError("features contain non-finite entries")
        if v.shape[1] > v.shape[0]:
            raise ConfigError(
                f"more features ({v.shape[1]}) than units ({v.shape[0]})"
            )
        object.__setattr__(self, "values", v)
        if self.labels and len(self.labels) != v.shape[1]:
            raise ConfigError("label count does not match feature count")

    @property
    def shape(self):
        return self.values.shape


def _as_features(x):
    if isinstance(x, FeatureMatrix):
        return x.values
    return FeatureMatrix(np.asarray(x, dtype=np.float64)).values


@dataclass(frozen=True)
class SideMetric:
    """(I - H)^(1/2) with pseudoinverse and null space, in eigen form.

    `vectors`/`values` hold H's eigenpairs with 0 < d < 1; `null_basis`
    spans the d = 1 directions, where the penalty vanishes and the model
    keeps a separate unpenalized block.
    """

    dim: int
    vectors: np.ndarray
    values: np.ndarray
    null_basis: np.ndarray
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        w = np.asarray(self.vectors, dtype=np.float64).reshape(self.dim, -1)
        d = np.asarray(self.values, dtype=np.float64).ravel()
        nb = np.asarray(self.null_basis, dtype=np.float64).reshape(self.dim, -1)
        if w.shape[1] != d.size:
            raise ConfigError("eigenvector/eigenvalue count mismatch")
        if d.size and (d.min() <= 0.0 or d.max() >= 1.0):
            raise ConfigError("kept eigenvalues must lie strictly inside (0, 1)")
        basis = np.hstack([w, nb])
        if basis.shape[1]:
            if basis.shape[1] > self.dim:
                raise ConfigError("more eigen directions than the dimension")
            gram = basis.T @ basis
            if not np.allclose(gram, np.eye(basis.shape[1]), atol=1e-8):
                raise ConfigError("metric eigen directions are not orthonormal")
        object.__setattr__(self, "vectors", w)
        object.__setattr__(self, "values", d)
        object.__setattr__(self, "null_basis", nb)

    # -- structure ---------------------------------------------------------
    @property
    def null_dim(self):
        return self.null_basis.shape[1]

    @property
    def is_identity(self):
        return self.values.size == 0 and self.null_dim == 0

    def pinv_norm(self):
        """Spectral norm of the pseudoinverse (step-size correction)."""
        cands = []
        if self.values.size:
            cands.append(float(np.max(1.0 / np.sqrt(1.0 - self.values))))
        if self.values.size + self.null_dim < self.dim:
            cands.append(1.0)
        return max(cands) if cands else 0.0

    # -- dense block applies -----------------------------------------------
    def _low_rank_apply(self, x, coef):
        y = np.asarray(x, dtype=np.float64)
        out = y.copy()
        if self.values.size:
            out += self.vectors @ (coef[:, None] * (self.vectors.T @ y))
        if self.null_dim:
            out -= self.null_basis @ (self.null_basis.T @ y)
        return out

    def apply_sqrt(self, x):
        return self._low_rank_apply(x, np.sqrt(1.0 - self.values) - 1.0)

    def apply_pinv(self, x):
        return self._low_rank_apply(x, 1.0 / np.sqrt(1.0 - self.values) - 1.0)

    def apply_null_proj(self, x):
        if not self.null_dim:
            return np.zeros_like(np.asarray(x, dtype=np.float64))
        return self.null_basis @ (self.null_basis.T @ np.asarray(x, dtype=np.float64))

    # -- operator views ------------------------------------------------------
    def _op(self, coef) -> LinOp:
        parts = [identity(self.dim)]
        if self.values.size:
            parts.append(low_rank(self.vectors * coef[None, :], self.vectors))
        if self.null_dim:
            parts.append(low_rank(-self.null_basis, self.null_basis))
        return add(*parts) if len(parts) > 1 else parts[0]

    def sqrt_op(self) -> LinOp:
        return self._op(np.sqrt(1.0 - self.values) - 1.0)

    def pinv_op(self) -> LinOp:
        return self._op(1.0 / np.sqrt(1.0 - self.values) - 1.0)

    def dense_hat(self):
        out = np.zeros((self.dim, self.dim))
        if self.values.size:
            out += self.vectors @ (self.values[:, None] * self.vectors.T)
        if self.null_dim:
            out += self.null_basis @ self.null_basis.T
        return out

    def dense_sqrt(self):
        return self.apply_sqrt(np.eye(self.dim))

    def dense_pinv(self):
        return self.apply_pinv(np.eye(self.dim))

    def dense_null_proj(self):
        return self.apply_null_proj(np.eye(self.dim))


def identity_metric(dim):
    return SideMetric(int(dim), np.zeros((dim, 0)), np.zeros(0), np.zeros((dim, 0)))


def _metric_from_eigenpairs(dim, w, d, metadata=None):
    d = np.asarray(d, dtype=np.float64).ravel()
    w = np.asarray(w, dtype=np.float64).reshape(dim, -1)
    if d.size and (d.min() < -1e-10 or d.max() > 1.0 + 1e-10):
        raise ConfigError(
            f"smoother eigenvalues outside [0, 1]: ||H|| <= 1 violated "
            f"(range [{d.min():.3g}, {d.max():.3g}])"
        )
    d = np.clip(d, 0.0, 1.0)
    is_null = d >= 1.0 - NULL_THRESHOLD
    keep = (~is_null) & (d > 1e-12)
    return SideMetric(
        dim,
        w[:, keep],
        np.minimum(d[keep], 1.0 - NULL_THRESHOLD / 2),
        w[:, is_null],
        metadata=dict(metadata or {}),
    )


def ridge_hat(x, sigma2, prior_precision) -> SideMetric:
    """Metric from the generalized-ridge hat matrix X (X'X + s2 * Prec)^-1 X'.

    Eigenpairs come from a small core matrix (p x p), never from the
    n x n hat matrix itself.
    """
    xv = _as_features(x)
    n, p = xv.shape
    sigma2 = float(sigma2)
    if sigma2 <= 0:
        raise ConfigError("sigma2 must be positive")
    prec = np.asarray(prior_precision, dtype=np.float64)
    if prec.ndim == 0:
        prec = float(prec) * np.eye(p)
    if prec.shape != (p, p):
        raise ConfigError(f"prior precision must be {p} x {p}")
    if not np.allclose(prec, prec.T, atol=1e-10):
        raise ConfigError("prior precision must be symmetric")
    try:
        np.linalg.cholesky(prec + 0.0)
    except np.linalg.LinAlgError:
        raise ConfigError("prior precision must be positive definite") from None

    u, s, vt = np.linalg.svd(xv, full_matrices=False)
    nz = s > 1e-12 * max(s.max(initial=0.0), 1.0)
    u, s, vt = u[:, nz], s[nz], vt[nz]
    a = xv.T @ xv + sigma2 * prec
    core = (s[:, None] * vt) @ np.linalg.solve(a, vt.T * s[None, :])
    core = 0.5 * (core + core.T)
    d, e = np.linalg.eigh(core)
    if d.size and d.max() > 1.0 + 1e-10:
        raise ConfigError("hat matrix eigenvalue exceeds 1; precision is not PD")
    return _metric_from_eigenpairs(n, u @ e, d, metadata={"kind": "ridge", "sigma2": sigma2})


def projection_hat(x) -> SideMetric:
    """Flat-prior limit: H is the projection onto the feature column space."""
    xv = _as_features(x)
    n, p = xv.shape
    u, s, _ = np.linalg.svd(xv, full_matrices=False)
    keep = s > 1e-10 * max(s.max(initial=0.0), 1.0)
    if keep.sum() < p:
        warnings.warn(
            f"feature matrix is rank deficient ({int(keep.sum())} < {p}); "
            "dropping the deficient directions",
            stacklevel=2,
        )
    u = u[:, keep]
    if u.shape[1] == n:
        warnings.warn(
            "features span the whole space; the metric is zero and nothing is penalized",
            stacklevel=2,
        )
    return _metric_from_eigenpairs(
        n, u, np.ones(u.shape[1]), metadata={"kind": "projection"}
    )


def smoother_metric(eigenvectors, eigenvalues, metadata=None) -> SideMetric:
    """Metric from externally supplied eigenpairs of a PSD linear smoother."""
    w = np.asarray(eigenvectors, dtype=np.float64)
    if w.ndim != 2:
        raise ConfigError("eigenvector block must be 2-d")
    gram = w.T @ w
    if w.shape[1] and not np.allclose(gram, np.eye(w.shape[1]), atol=1e-8):
        raise ConfigError("smoother eigenvectors must be orthonormal")
    return _metric_from_eigenpairs(
        w.shape[0], w, eigenvalues, metadata=dict(metadata or {"kind": "smoother"})
    )


def natural_spline_basis(points, df):
    """Natural cubic spline basis evaluated at `points` (len(points) x df).

    Knots: boundary at min/max, interior at equally spaced quantiles of
    the points.  df counts the intercept, so df = 2 spans affine
    functions.  Columns are rescaled to unit max magnitude, which leaves
    the span unchanged but keeps the basis well conditioned on wide grids.
    """
    pts = np.asarray(points, dtype=np.float64).ravel()
    df = int(df)
    if df < 2:
        raise ConfigError("natural spline needs df >= 2")
    if pts.size < df:
        raise ConfigError(f"need at least df={df} points, got {pts.size}")
    if np.unique(pts).size != pts.size:
        raise ConfigError("points must be distinct")
    pts = np.sort(pts)
    knots = spline_knots(pts, df)
    basis = _natural_spline_design(pts, knots)
    return basis / np.abs(basis).max(axis=0)


def spline_knots(points, df):
    """Boundary knots at min/max, df - 2 interior knots at quantiles."""
    pts = np.sort(np.asarray(points, dtype=np.float64).ravel())
    if df == 2:
        knots = np.array([pts[0], pts[-1]])
    else:
        qs = np.arange(1, df - 1) / (df - 1)
        knots = np.concatenate([[pts[0]], np.quantile(pts, qs), [pts[-1]]])
    if np.unique(knots).size != knots.size:
        raise ConfigError("too few distinct points: knots coincide")
    return knots


def _natural_spline_design(t, knots):
    # truncated-power construction: 1, t, and d_k(t) - d_{K-1}(t)
    k = knots.size
    cols = [np.ones_like(t), t]

    def dk(j):
        num = np.maximum(t - knots[j], 0.0) ** 3 - np.maximum(t - knots[-1], 0.0) ** 3
        return num / (knots[-1] - knots[j])

    if k > 2:
        dlast = dk(k - 2)
        for j in range(k - 2):
            cols.append(dk(j) - dlast)
    return np.column_stack(cols)


@dataclass(frozen=True)
class NestedSplines:
    """A coarse/fine natural-spline pair whose spans nest exactly."""

    coarse: np.ndarray
    fine: np.ndarray
    coarse_knots: np.ndarray
    fine_knots: np.ndarray


def nested_spline_bases(points, df_coarse, df_fine) -> NestedSplines:
    """Natural-spline bases with span(coarse) contained in span(fine).

    Spline spaces nest only under knot refinement, so the coarse basis
    cannot use its own quantile knots.  The fine basis gets the standard
    quantile knots; the coarse interior knots are the subset of fine
    interior knots nearest the coarse quantile positions.
    """
    if df_coarse > df_fine:
        raise ConfigError("df_coarse must not exceed df_fine")
    pts = np.sort(np.asarray(points, dtype=np.float64).ravel())
    fine_knots = spline_knots(pts, df_fine)
    targets = spline_knots(pts, df_coarse)[1:-1]
    cands = list(fine_knots[1:-1])
    picked = []
    for tgt in targets:
        j = int(np.argmin([abs(c - tgt) for c in cands]))
        picked.append(cands.pop(j))
    coarse_knots = np.concatenate([[fine_knots[0]], np.sort(picked), [fine_knots[-1]]])
    fine = _natural_spline_design(pts, fine_knots)
    coarse = _natural_spline_design(pts, coarse_knots)
    return NestedSplines(
        coarse / np.abs(coarse).max(axis=0),
        fine / np.abs(fine).max(axis=0),
        coarse_knots,
        fine_knots,
    )


@dataclass(frozen=True)
class ColumnSubspace:
    """Hard column constraint: span(fine), shrunk toward span(coarse).

    `b0` is the orthonormalized coarse block (unpenalized coefficients);
    `b1` spans the part of the fine basis orthogonal to it (nuclear-norm
    penalized coefficients).  Directions outside the fine span carry no
    model component at all.
    """

    b0: np.ndarray
    b1: np.ndarray
    metadata: dict = field(default_factory=dict, compare=False)

    @property
    def transform(self):
        return np.hstack([self.b0, self.b1])

    @property
    def coarse_dim(self):
        return self.b0.shape[1]

    @property
    def fine_dim(self):
        return self.b0.shape[1] + self.b1.shape[1]

    def metric(self) -> SideMetric:
        """Penalty on the transformed coordinates: null on b0, identity on b1."""
        k0, k1 = self.coarse_dim, self.b1.shape[1]
        eye = np.eye(k0 + k1)
        return SideMetric(k0 + k1, np.zeros((k0 + k1, 0)), np.zeros(0), eye[:, :k0])


def column_subspace_model(coarse_basis, fine_basis, metadata=None) -> ColumnSubspace:
    """Orthonormal blocks for a subspace-constrained column model."""
    coarse = np.asarray(coarse_basis, dtype=np.float64)
    fine = np.asarray(fine_basis, dtype=np.float64)
    if coarse.ndim != 2 or fine.ndim != 2 or coarse.shape[0] != fine.shape[0]:
        raise ConfigError("coarse and fine bases must share their first dimension")
    uf, sf, _ = np.linalg.svd(fine, full_matrices=False)
    uf = uf[:, sf > 1e-10 * max(sf.max(initial=0.0), 1.0)]
    resid = coarse - uf @ (uf.T @ coarse)
    if np.linalg.norm(resid) > 1e-8 * max(np.linalg.norm(coarse), 1.0):
        raise ConfigError("coarse basis is not contained in the fine basis span")
    u0, s0, _ = np.linalg.svd(coarse, full_matrices=False)
    b0 = u0[:, s0 > 1e-10 * max(s0.max(initial=0.0), 1.0)]
    comp = uf - b0 @ (b0.T @ uf)
    u1, s1, _ = np.linalg.svd(comp, full_matrices=False)
    b1 = u1[:, s1 > 1e-10 * max(s1.max(initial=0.0), 1.0)]
    return ColumnSubspace(b0, b1, metadata=dict(metadata or {}))
