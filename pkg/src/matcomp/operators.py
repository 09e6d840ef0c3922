"""Implicit linear operators over sparse, low-rank, and small matrices.

Everything the SVD and solver touch is expressed as a `LinOp`: an operator
that can multiply a block (`apply`) and its transpose (`apply_adjoint`)
without ever materializing the full matrix.  Applies are charged to a
module-level flop counter so that cost-scaling properties can be asserted
in tests instead of relying on wall clock.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DataError, DimensionError, SingularSystemError


class FlopCounter:
    """Best-effort flop accounting for operator applies.

    A single global instance (`flops`) is shared by all operators; it is
    plain instrumentation and not thread-safe.
    """

    def __init__(self):
        self.count = 0

    def add(self, n):
        self.count += int(n)

    def reset(self):
        self.count = 0


flops = FlopCounter()


def _as_block(x, dim, what="operand"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
        squeeze = True
    elif x.ndim == 2:
        squeeze = False
    else:
        raise DimensionError(f"{what} must be a vector or 2-d block, got ndim={x.ndim}")
    if x.shape[0] != dim:
        raise DimensionError(f"{what} has {x.shape[0]} rows, operator expects {dim}")
    return x, squeeze


class ObservedMatrix:
    """Sparse triplet store of the observed entries Y over the index set.

    Entries are kept sorted row-major for fast row iteration; duplicate
    (row, col) pairs are rejected rather than summed, since duplicated
    observations are almost always an upstream bug.
    """

    def __init__(self, n_rows, n_cols, rows, cols, values):
        n_rows, n_cols = int(n_rows), int(n_cols)
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        values = np.asarray(values, dtype=np.float64).ravel()
        if not (rows.size == cols.size == values.size):
            raise DimensionError("rows, cols, values must have equal length")
        if rows.size == 0:
            raise DataError("observation set must contain at least one entry")
        if n_rows <= 0 or n_cols <= 0:
            raise DimensionError("matrix dimensions must be positive")
        if rows.min() < 0 or rows.max() >= n_rows:
            bad = rows[(rows < 0) | (rows >= n_rows)][0]
            raise DataError(f"row index {bad} out of range [0, {n_rows})")
        if cols.min() < 0 or cols.max() >= n_cols:
            bad = cols[(cols < 0) | (cols >= n_cols)][0]
            raise DataError(f"column index {bad} out of range [0, {n_cols})")
        order = np.lexsort((cols, rows))
        rows, cols, values = rows[order], cols[order], values[order]
        dup = (np.diff(rows) == 0) & (np.diff(cols) == 0)
        if dup.any():
            k = int(np.flatnonzero(dup)[0])
            raise DataError(f"duplicate entry ({rows[k]}, {cols[k]}) in observations")
        self.n_rows = n_rows
        self.n_cols = n_cols
        self.rows = rows
        self.cols = cols
        self.values = values
        self._csr = None

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self):
        return self.rows.size

    def tocsr(self):
        if self._csr is None:
            self._csr = sp.csr_matrix(
                (self.values, (self.rows, self.cols)), shape=self.shape
            )
        return self._csr

    def with_values(self, values):
        """Same sparsity pattern, new values (skips re-validation)."""
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.size != self.nnz:
            raise DimensionError("value vector does not match the pattern size")
        out = object.__new__(ObservedMatrix)
        out.n_rows, out.n_cols = self.n_rows, self.n_cols
        out.rows, out.cols = self.rows, self.cols
        out.values = values
        out._csr = None
        return out

    def subset(self, mask):
        mask = np.asarray(mask, dtype=bool)
        return ObservedMatrix(
            self.n_rows, self.n_cols, self.rows[mask], self.cols[mask], self.values[mask]
        )

    def transposed(self):
        return ObservedMatrix(self.n_cols, self.n_rows, self.cols, self.rows, self.values)

    def row_counts(self):
        return np.bincount(self.rows, minlength=self.n_rows)

    def col_counts(self):
        return np.bincount(self.cols, minlength=self.n_cols)

    def to_dense(self):
        out = np.zeros(self.shape)
        out[self.rows, self.cols] = self.values
        return out


class LinOp:
    """Base class: an (n_rows x n_cols) linear map with block apply/adjoint."""

    n_rows: int
    n_cols: int

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    def apply(self, x):
        """Return op @ x for a vector or block x."""
        x, squeeze = _as_block(x, self.n_cols)
        y = self._apply(x)
        return y[:, 0] if squeeze else y

    def apply_adjoint(self, x):
        """Return op.T @ x for a vector or block x."""
        x, squeeze = _as_block(x, self.n_rows)
        y = self._apply_adjoint(x)
        return y[:, 0] if squeeze else y

    @property
    def T(self):
        return transpose(self)

    def to_dense(self):
        """Materialize (test-scale only; cost n_rows * n_cols)."""
        return self.apply(np.eye(self.n_cols))

    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        if isinstance(other, LinOp):
            return compose(self, other)
        return self.apply(other)

    def __rmul__(self, c):
        return scale(float(c), self)

    def __neg__(self):
        return scale(-1.0, self)


class DenseSmall(LinOp):
    def __init__(self, a):
        self.a = np.asarray(a, dtype=np.float64)
        if self.a.ndim != 2:
            raise DimensionError("DenseSmall expects a 2-d array")
        self.n_rows, self.n_cols = self.a.shape

    def _apply(self, x):
        flops.add(2 * self.a.size * x.shape[1])
        return self.a @ x

    def _apply_adjoint(self, x):
        flops.add(2 * self.a.size * x.shape[1])
        return self.a.T @ x


class SparseTriplet(LinOp):
    def __init__(self, entries: ObservedMatrix):
        self.entries = entries
        self.n_rows, self.n_cols = entries.shape

    def _apply(self, x):
        flops.add(2 * self.entries.nnz * x.shape[1])
        return self.entries.tocsr() @ x

    def _apply_adjoint(self, x):
        flops.add(2 * self.entries.nnz * x.shape[1])
        return self.entries.tocsr().T @ x


class Diagonal(LinOp):
    def __init__(self, d):
        self.d = np.asarray(d, dtype=np.float64).ravel()
        self.n_rows = self.n_cols = self.d.size

    def _apply(self, x):
        flops.add(self.d.size * x.shape[1])
        return self.d[:, None] * x

    _apply_adjoint = _apply


class LowRank(LinOp):
    """left @ right.T with tall skinny factors."""

    def __init__(self, left, right):
        self.left = np.asarray(left, dtype=np.float64)
        self.right = np.asarray(right, dtype=np.float64)
        if self.left.ndim != 2 or self.right.ndim != 2:
            raise DimensionError("LowRank factors must be 2-d")
        if self.left.shape[1] != self.right.shape[1]:
            raise DimensionError("LowRank factors must share the inner dimension")
        self.n_rows = self.left.shape[0]
        self.n_cols = self.right.shape[0]

    def _apply(self, x):
        k = self.left.shape[1]
        flops.add(2 * k * (self.n_rows + self.n_cols) * x.shape[1])
        return self.left @ (self.right.T @ x)

    def _apply_adjoint(self, x):
        k = self.left.shape[1]
        flops.add(2 * k * (self.n_rows + self.n_cols) * x.shape[1])
        return self.right @ (self.left.T @ x)


class Identity(LinOp):
    def __init__(self, dim):
        self.n_rows = self.n_cols = int(dim)

    def _apply(self, x):
        return x

    _apply_adjoint = _apply


class Scaled(LinOp):
    def __init__(self, c, child):
        self.c = float(c)
        self.child = child
        self.n_rows, self.n_cols = child.shape

    def _apply(self, x):
        y = self.child._apply(x)
        flops.add(y.size)
        return self.c * y

    def _apply_adjoint(self, x):
        y = self.child._apply_adjoint(x)
        flops.add(y.size)
        return self.c * y


class Sum(LinOp):
    def __init__(self, children):
        if not children:
            raise DimensionError("Sum needs at least one child")
        shape = children[0].shape
        for c in children[1:]:
            if c.shape != shape:
                raise DimensionError(f"Sum children disagree in shape: {c.shape} vs {shape}")
        self.children = tuple(children)
        self.n_rows, self.n_cols = shape

    def _apply(self, x):
        y = self.children[0]._apply(x)
        for c in self.children[1:]:
            y = y + c._apply(x)
            flops.add(y.size)
        return y

    def _apply_adjoint(self, x):
        y = self.children[0]._apply_adjoint(x)
        for c in self.children[1:]:
            y = y + c._apply_adjoint(x)
            flops.add(y.size)
        return y


class Product(LinOp):
    def __init__(self, children):
        if not children:
            raise DimensionError("Product needs at least one child")
        for a, b in zip(children, children[1:]):
            if a.n_cols != b.n_rows:
                raise DimensionError(
                    f"Product children do not chain: {a.shape} then {b.shape}"
                )
        self.children = tuple(children)
        self.n_rows = children[0].n_rows
        self.n_cols = children[-1].n_cols

    def _apply(self, x):
        for c in reversed(self.children):
            x = c._apply(x)
        return x

    def _apply_adjoint(self, x):
        for c in self.children:
            x = c._apply_adjoint(x)
        return x


class Transposed(LinOp):
    def __init__(self, child):
        self.child = child
        self.n_rows, self.n_cols = child.n_cols, child.n_rows

    def _apply(self, x):
        return self.child._apply_adjoint(x)

    def _apply_adjoint(self, x):
        return self.child._apply(x)


def identity(dim):
    return Identity(dim)


def diagonal(d):
    return Diagonal(d)


def dense(a):
    return DenseSmall(a)


def sparse(entries: ObservedMatrix):
    return SparseTriplet(entries)


def low_rank(left, right):
    return LowRank(left, right)


def add(*ops):
    """Sum of operators; nested Sums are flattened by convention."""
    flat = []
    for op in ops:
        if isinstance(op, Sum):
            flat.extend(op.children)
        else:
            flat.append(op)
    if len(flat) == 1:
        return flat[0]
    return Sum(flat)


def compose(*ops):
    """Product of operators; identities are dropped, nested Products flattened."""
    flat = []
    for op in ops:
        if isinstance(op, Product):
            flat.extend(op.children)
        elif isinstance(op, Identity):
            continue
        else:
            flat.append(op)
    if not flat:
        return Identity(ops[0].n_rows)
    if len(flat) == 1:
        return flat[0]
    return Product(flat)


def scale(c, op):
    """c * op; scalars fold into leaves where that is a cheap copy."""
    c = float(c)
    if c == 1.0:
        return op
    if isinstance(op, Scaled):
        return scale(c * op.c, op.child)
    if isinstance(op, DenseSmall):
        return DenseSmall(c * op.a)
    if isinstance(op, Diagonal):
        return Diagonal(c * op.d)
    if isinstance(op, LowRank):
        return LowRank(c * op.left, op.right)
    if isinstance(op, Identity):
        return Diagonal(np.full(op.n_rows, c))
    return Scaled(c, op)


def transpose(op):
    if isinstance(op, Transposed):
        return op.child
    if isinstance(op, (Diagonal, Identity)):
        return op
    return Transposed(op)


@dataclass(frozen=True)
class SymmetricSolvable:
    """A = base * I + W diag(d) W^T with orthonormal W; solvable in O(n k)."""

    base: float
    eigenvectors: np.ndarray = field(default=None)
    eigenvalues: np.ndarray = field(default=None)

    def __post_init__(self):
        w = self.eigenvectors
        d = self.eigenvalues
        if (w is None) != (d is None):
            raise DimensionError("eigenvector/eigenvalue correction must come together")
        if w is not None:
            w = np.asarray(w, dtype=np.float64)
            d = np.asarray(d, dtype=np.float64).ravel()
            if w.ndim != 2 or w.shape[1] != d.size:
                raise DimensionError("correction shapes do not conform")
            gram = w.T @ w
            if not np.allclose(gram, np.eye(d.size), atol=1e-10):
                raise DataError("correction eigenvectors are not orthonormal")
            object.__setattr__(self, "eigenvectors", w)
            object.__setattr__(self, "eigenvalues", d)

    @property
    def dim(self):
        if self.eigenvectors is None:
            raise DimensionError("dimension unknown without a correction term")
        return self.eigenvectors.shape[0]

    def apply(self, x):
        if self.eigenvectors is None:
            return self.base * np.asarray(x, dtype=np.float64)
        x, squeeze = _as_block(x, self.dim)
        y = self.base * x + self.eigenvectors @ (
            self.eigenvalues[:, None] * (self.eigenvectors.T @ x)
        )
        return y[:, 0] if squeeze else y

    def to_dense(self):
        out = self.base * np.eye(self.dim)
        out += self.eigenvectors @ (self.eigenvalues[:, None] * self.eigenvectors.T)
        return out


def woodbury_solve(a: SymmetricSolvable, b):
    """Solve a @ x = b using the eigen form of the low-rank correction.

    Cost is O((n k + k^3) * width) for a k-term correction; in the eigen
    representation the k^3 term degenerates to O(k).
    """
    c = a.base
    if c <= 0:
        raise SingularSystemError(f"base scalar must be positive, got {c}")
    if a.eigenvectors is None:
        return np.asarray(b, dtype=np.float64) / c
    shifted = c + a.eigenvalues
    bad = np.abs(shifted) < 1e-12 * c
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise SingularSystemError(
            f"system is singular: eigenvalue {a.eigenvalues[k]} at index {k} "
            f"cancels the base scalar {c}"
        )
    x, squeeze = _as_block(b, a.dim, "right-hand side")
    coef = (1.0 / shifted - 1.0 / c)[:, None]
    y = x / c + a.eigenvectors @ (coef * (a.eigenvectors.T @ x))
    return y[:, 0] if squeeze else y
