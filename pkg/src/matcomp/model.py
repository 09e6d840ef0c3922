"""Model assembly: offsets, penalty metrics, and the three-block convex
parameterization of the interaction matrix.

The interaction is stored as
    Gamma = T_row (Pinv G1 Qinv + N_P G2 + G3 N_Q') T_col'
where P, Q are the margin metrics on the (possibly transformed) row and
column coordinates, N_P, N_Q span their null spaces, and T_row / T_col
are optional orthonormal column transforms (used for hard subspace
constraints).  G1 is kept factored; only G1 carries the nuclear penalty.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError
from .losses import Loss, loss_gradient_sparse, loss_value
from .operators import LinOp, ObservedMatrix, compose, dense, flops, sparse, transpose
from .sideinfo import ColumnSubspace, SideMetric, identity_metric
from .svd import WarmBasis

OFFSET_MODES = ("none", "intercept", "features")


@dataclass(frozen=True)
class Margin:
    """One side of the problem: ambient dimension, optional orthonormal
    transform into the effective coordinates, and the penalty metric there."""

    dim: int
    metric: SideMetric
    transform: np.ndarray | None = None

    def __post_init__(self):
        if self.transform is not None:
            t = np.asarray(self.transform, dtype=np.float64)
            if t.ndim != 2 or t.shape[0] != self.dim:
                raise ConfigError("margin transform must be (dim x eff_dim)")
            if not np.allclose(t.T @ t, np.eye(t.shape[1]), atol=1e-8):
                raise ConfigError("margin transform must have orthonormal columns")
            object.__setattr__(self, "transform", t)
        if self.metric.dim != self.eff_dim:
            raise ConfigError(
                f"metric dimension {self.metric.dim} does not match effective "
                f"dimension {self.eff_dim}"
            )

    @property
    def eff_dim(self):
        return self.dim if self.transform is None else self.transform.shape[1]

    @staticmethod
    def identity(dim):
        return Margin(dim, identity_metric(dim))

    @staticmethod
    def with_metric(dim, metric: SideMetric):
        return Margin(dim, metric)

    @staticmethod
    def with_subspace(dim, subspace: ColumnSubspace):
        t = subspace.transform
        if t.shape[0] != dim:
            raise ConfigError("subspace basis rows do not match the margin dimension")
        return Margin(dim, subspace.metric(), t)

    def map_out(self, f):
        """Effective-coordinate block (eff_dim x k) -> ambient (dim x k)."""
        if self.transform is None:
            return f
        flops.add(2 * self.transform.size * f.shape[1])
        return self.transform @ f


@dataclass(frozen=True)
class ModelSpec:
    loss: Loss
    n_rows: int
    n_cols: int
    lam_gamma: float
    row_margin: Margin
    col_margin: Margin
    intercept: bool = True
    row_effects: str = "none"
    col_effects: str = "none"
    row_features: np.ndarray | None = None
    col_features: np.ndarray | None = None
    lam_alpha: float = 0.0
    lam_beta: float = 0.0
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.lam_gamma <= 0:
            raise ConfigError("lam_gamma must be positive")
        if self.lam_alpha < 0 or self.lam_beta < 0:
            raise ConfigError("offset ridge weights must be nonnegative")
        for side, effects, feats, dim in (
            ("row", self.row_effects, self.row_features, self.n_rows),
            ("col", self.col_effects, self.col_features, self.n_cols),
        ):
            if effects not in OFFSET_MODES:
                raise ConfigError(f"{side}_effects must be one of {OFFSET_MODES}")
            if effects == "features":
                if feats is None:
                    raise ConfigError(f"{side}_effects='features' needs {side}_features")
                f = np.asarray(feats, dtype=np.float64)
                if f.ndim != 2 or f.shape[0] != dim:
                    raise ConfigError(f"{side}_features must be ({dim} x p)")
            elif feats is not None:
                raise ConfigError(f"{side}_features given but {side}_effects={effects!r}")
        if self.row_margin.dim != self.n_rows or self.col_margin.dim != self.n_cols:
            raise ConfigError("margin dimensions must match the matrix shape")

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    def offset_dim(self, side):
        effects = self.row_effects if side == "row" else self.col_effects
        feats = self.row_features if side == "row" else self.col_features
        dim = self.n_rows if side == "row" else self.n_cols
        if effects == "none":
            return 0
        if effects == "intercept":
            return dim
        return np.asarray(feats).shape[1]

    def transposed(self):
        return replace(
            self,
            n_rows=self.n_cols,
            n_cols=self.n_rows,
            row_margin=self.col_margin,
            col_margin=self.row_margin,
            row_effects=self.col_effects,
            col_effects=self.row_effects,
            row_features=self.col_features,
            col_features=self.row_features,
            lam_alpha=self.lam_beta,
            lam_beta=self.lam_alpha,
        )


def build_spec(loss: Loss, n_rows, n_cols, *, lam_gamma, intercept=True,
               row_effects="none", col_effects="none", row_features=None,
               col_features=None, lam_alpha=0.0, lam_beta=0.0,
               row_metric: SideMetric | None = None,
               col_metric: SideMetric | None = None,
               col_subspace: ColumnSubspace | None = None,
               metadata=None) -> ModelSpec:
    """Convenience constructor wiring metrics/constraints into margins."""
    if col_subspace is not None and col_metric is not None:
        raise ConfigError("give either a column metric or a column subspace, not both")
    row_margin = (
        Margin.identity(n_rows) if row_metric is None else Margin.with_metric(n_rows, row_metric)
    )
    if col_subspace is not None:
        col_margin = Margin.with_subspace(n_cols, col_subspace)
    elif col_metric is not None:
        col_margin = Margin.with_metric(n_cols, col_metric)
    else:
        col_margin = Margin.identity(n_cols)
    return ModelSpec(
        loss=loss, n_rows=int(n_rows), n_cols=int(n_cols), lam_gamma=float(lam_gamma),
        row_margin=row_margin, col_margin=col_margin, intercept=bool(intercept),
        row_effects=row_effects, col_effects=col_effects,
        row_features=None if row_features is None else np.asarray(row_features, dtype=np.float64),
        col_features=None if col_features is None else np.asarray(col_features, dtype=np.float64),
        lam_alpha=float(lam_alpha), lam_beta=float(lam_beta),
        metadata=dict(metadata or {}),
    )


@dataclass
class Gamma1:
    """Factored penalized block: left diag(values) right'."""

    left: np.ndarray
    values: np.ndarray
    right: np.ndarray

    @property
    def rank(self):
        return self.values.size

    def nuclear_norm(self):
        return float(self.values.sum())

    @staticmethod
    def zero(n_eff, m_eff):
        return Gamma1(np.zeros((n_eff, 0)), np.zeros(0), np.zeros((m_eff, 0)))


@dataclass
class ModelState:
    mu: float
    alpha: np.ndarray
    beta: np.ndarray
    gamma1: Gamma1
    gamma2: np.ndarray | None
    gamma3: np.ndarray | None
    warm: WarmBasis | None = None

    def transposed(self):
        g1 = Gamma1(self.gamma1.right, self.gamma1.values, self.gamma1.left)
        warm = None
        if self.gamma1.rank:
            warm = WarmBasis(self.gamma1.right, self.gamma1.rank)
        return ModelState(
            mu=self.mu, alpha=self.beta, beta=self.alpha, gamma1=g1,
            gamma2=None if self.gamma3 is None else self.gamma3.T,
            gamma3=None if self.gamma2 is None else self.gamma2.T,
            warm=warm,
        )


def zero_state(spec: ModelSpec) -> ModelState:
    n_eff = spec.row_margin.eff_dim
    m_eff = spec.col_margin.eff_dim
    k_p = spec.row_margin.metric.null_dim
    k_q = spec.col_margin.metric.null_dim
    return ModelState(
        mu=0.0,
        alpha=np.zeros(spec.offset_dim("row")),
        beta=np.zeros(spec.offset_dim("col")),
        gamma1=Gamma1.zero(n_eff, m_eff),
        gamma2=np.zeros((k_p, m_eff)) if k_p else None,
        gamma3=np.zeros((n_eff, k_q)) if k_q else None,
    )


def check_state(spec: ModelSpec, state: ModelState):
    n_eff = spec.row_margin.eff_dim
    m_eff = spec.col_margin.eff_dim
    g1 = state.gamma1
    if g1.left.shape != (n_eff, g1.rank) or g1.right.shape != (m_eff, g1.rank):
        raise DimensionError("gamma1 factor shapes do not conform to the spec")
    k_p = spec.row_margin.metric.null_dim
    k_q = spec.col_margin.metric.null_dim
    if (state.gamma2 is None) != (k_p == 0):
        raise DimensionError("gamma2 must be present iff the row metric has a null space")
    if state.gamma2 is not None and state.gamma2.shape != (k_p, m_eff):
        raise DimensionError("gamma2 shape does not conform")
    if (state.gamma3 is None) != (k_q == 0):
        raise DimensionError("gamma3 must be present iff the column metric has a null space")
    if state.gamma3 is not None and state.gamma3.shape != (n_eff, k_q):
        raise DimensionError("gamma3 shape does not conform")
    if state.alpha.shape != (spec.offset_dim("row"),):
        raise DimensionError("alpha length does not match the offset design")
    if state.beta.shape != (spec.offset_dim("col"),):
        raise DimensionError("beta length does not match the offset design")


def margin_offsets(spec: ModelSpec, state: ModelState):
    """Per-row and per-column additive offsets (ambient coordinates)."""
    def one(effects, feats, coef, dim):
        if effects == "none":
            return np.zeros(dim)
        if effects == "intercept":
            return coef
        return feats @ coef

    row = one(spec.row_effects, spec.row_features, state.alpha, spec.n_rows)
    col = one(spec.col_effects, spec.col_features, state.beta, spec.n_cols)
    return row, col


def interaction_factors(spec: ModelSpec, state: ModelState):
    """Ambient-coordinate factor pair (n x K, m x K) whose product is Gamma."""
    rm, cm = spec.row_margin, spec.col_margin
    row_parts, col_parts = [], []
    g1 = state.gamma1
    if g1.rank:
        row_parts.append(rm.map_out(rm.metric.apply_pinv(g1.left) * g1.values[None, :]))
        col_parts.append(cm.map_out(cm.metric.apply_pinv(g1.right)))
    if state.gamma2 is not None and state.gamma2.shape[0]:
        row_parts.append(rm.map_out(rm.metric.null_basis))
        col_parts.append(cm.map_out(state.gamma2.T))
    if state.gamma3 is not None and state.gamma3.shape[1]:
        row_parts.append(rm.map_out(state.gamma3))
        col_parts.append(cm.map_out(cm.metric.null_basis))
    if not row_parts:
        return np.zeros((spec.n_rows, 0)), np.zeros((spec.n_cols, 0))
    return np.hstack(row_parts), np.hstack(col_parts)


def gather_product(row_block, col_block, rows, cols):
    """(row_block @ col_block.T) sampled at (rows[k], cols[k]) pairs."""
    if row_block.shape[1] == 0:
        return np.zeros(rows.size)
    flops.add(2 * rows.size * row_block.shape[1])
    return np.einsum("ij,ij->i", row_block[rows], col_block[cols])


def theta_on_omega(spec: ModelSpec, state: ModelState, y: ObservedMatrix):
    """Natural parameter at each observed entry, in observation order."""
    if y.shape != spec.shape:
        raise DimensionError(f"observations are {y.shape}, spec is {spec.shape}")
    check_state(spec, state)
    row_off, col_off = margin_offsets(spec, state)
    rb, cb = interaction_factors(spec, state)
    theta = np.full(y.nnz, state.mu if spec.intercept else 0.0)
    theta += row_off[y.rows] + col_off[y.cols]
    theta += gather_product(rb, cb, y.rows, y.cols)
    flops.add(4 * y.nnz)
    return theta


def dense_theta(spec: ModelSpec, state: ModelState, *, _guard=10_000):
    """Full parameter matrix; test-scale helper."""
    if spec.n_rows * spec.n_cols > _guard:
        raise ConfigError("dense_theta is a small-problem helper")
    row_off, col_off = margin_offsets(spec, state)
    rb, cb = interaction_factors(spec, state)
    out = np.full(spec.shape, state.mu if spec.intercept else 0.0)
    out += row_off[:, None] + col_off[None, :]
    out += rb @ cb.T
    return out


def objective(spec: ModelSpec, state: ModelState, y: ObservedMatrix,
              theta=None):
    """loss + lam_gamma * ||G1||_* + ridge terms on the offsets.

    G2/G3 enter the loss but carry no penalty (unpenalized null
    directions).
    """
    if theta is None:
        theta = theta_on_omega(spec, state, y)
    val = loss_value(spec.loss, theta, y)
    val += spec.lam_gamma * state.gamma1.nuclear_norm()
    if state.alpha.size:
        val += 0.5 * spec.lam_alpha * float(state.alpha @ state.alpha)
    if state.beta.size:
        val += 0.5 * spec.lam_beta * float(state.beta @ state.beta)
    return val


@dataclass
class BlockGradients:
    """Exact gradients of the smooth part (loss + ridge) per block."""

    mu: float
    alpha: np.ndarray
    beta: np.ndarray
    gamma1: LinOp          # pinv(P) G_eff pinv(Q), never materialized
    gamma2: np.ndarray | None
    gamma3: np.ndarray | None
    entries: ObservedMatrix  # sparse loss gradient on the observation pattern


def effective_gradient_op(spec: ModelSpec, grad_entries: ObservedMatrix) -> LinOp:
    """Sparse loss gradient mapped into effective coordinates (EA)."""
    parts = []
    if spec.row_margin.transform is not None:
        parts.append(transpose(dense(spec.row_margin.transform)))
    parts.append(sparse(grad_entries))
    if spec.col_margin.transform is not None:
        parts.append(dense(spec.col_margin.transform))
    return compose(*parts)


def block_gradients(spec: ModelSpec, state: ModelState, y: ObservedMatrix,
                    theta=None) -> BlockGradients:
    if theta is None:
        theta = theta_on_omega(spec, state, y)
    g = loss_gradient_sparse(spec.loss, theta, y)
    gv = g.values
    g_mu = float(gv.sum()) if spec.intercept else 0.0

    def offset_grad(effects, feats, coef, lam, sums):
        if effects == "none":
            return np.zeros(0)
        if effects == "intercept":
            return sums + lam * coef
        return feats.T @ sums + lam * coef

    row_sums = np.bincount(y.rows, weights=gv, minlength=spec.n_rows)
    col_sums = np.bincount(y.cols, weights=gv, minlength=spec.n_cols)
    flops.add(4 * y.nnz)
    g_alpha = offset_grad(spec.row_effects, spec.row_features, state.alpha,
                          spec.lam_alpha, row_sums)
    g_beta = offset_grad(spec.col_effects, spec.col_features, state.beta,
                         spec.lam_beta, col_sums)

    eff = effective_gradient_op(spec, g)
    rm, cm = spec.row_margin.metric, spec.col_margin.metric
    g_gamma1 = compose(rm.pinv_op(), eff, cm.pinv_op())
    g_gamma2 = None
    if rm.null_dim:
        g_gamma2 = eff.apply_adjoint(rm.null_basis).T
    g_gamma3 = None
    if cm.null_dim:
        g_gamma3 = eff.apply(cm.null_basis)
    return BlockGradients(g_mu, g_alpha, g_beta, g_gamma1, g_gamma2, g_gamma3, g)
