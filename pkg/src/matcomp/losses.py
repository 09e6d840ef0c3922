"""Exponential-family losses over the observed entries.

The loss is sum over observed (i, j) of psi(theta_ij) - y_ij * theta_ij,
with the base-measure constant dropped; objective values are therefore
comparable only within a fixed dataset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DataError
from .operators import ObservedMatrix, flops

GAUSSIAN = "gaussian"
BERNOULLI = "bernoulli"
POISSON = "poisson"

_KINDS = (GAUSSIAN, BERNOULLI, POISSON)


@dataclass(frozen=True)
class Loss:
    """A convex entry loss: which family, plus the Poisson parameter cap.

    Poisson has unbounded curvature, so fixed-step descent needs an
    explicit upper bound on the natural parameter, supplied here.
    """

    kind: str
    theta_cap: float | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}; expected one of {_KINDS}")

    @staticmethod
    def gaussian():
        return Loss(GAUSSIAN)

    @staticmethod
    def bernoulli():
        return Loss(BERNOULLI)

    @staticmethod
    def poisson(theta_cap):
        return Loss(POISSON, float(theta_cap))

    def psi(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if self.kind == GAUSSIAN:
            return 0.5 * theta * theta
        if self.kind == BERNOULLI:
            # stable log(1 + exp(theta)) for |theta| > 700
            return np.logaddexp(0.0, theta)
        return np.exp(theta)

    def psi_prime(self, theta):
        """Mean function (inverse canonical link)."""
        theta = np.asarray(theta, dtype=np.float64)
        if self.kind == GAUSSIAN:
            return theta
        if self.kind == BERNOULLI:
            return expit(theta)
        return np.exp(theta)

    def psi_second(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if self.kind == GAUSSIAN:
            return np.ones_like(theta)
        if self.kind == BERNOULLI:
            p = expit(theta)
            return p * (1.0 - p)
        return np.exp(theta)


def validate_responses(loss: Loss, y: ObservedMatrix):
    """Reject responses outside the family's support, naming the entry."""
    vals = y.values
    if loss.kind == BERNOULLI:
        bad = (vals != 0.0) & (vals != 1.0)
    elif loss.kind == POISSON:
        bad = (vals < 0) | (vals != np.round(vals))
    else:
        bad = ~np.isfinite(vals)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise DataError(
            f"invalid {loss.kind} response {vals[k]} at entry ({y.rows[k]}, {y.cols[k]})"
        )


def loss_value(loss: Loss, theta_on_omega, y: ObservedMatrix):
    """Negative log-likelihood over the observed entries (constants dropped)."""
    theta = np.asarray(theta_on_omega, dtype=np.float64)
    if theta.shape != (y.nnz,):
        raise DataError("theta vector is not aligned with the observed entries")
    validate_responses(loss, y)
    flops.add(3 * y.nnz)
    return float(np.sum(loss.psi(theta) - y.values * theta))


def loss_gradient_sparse(loss: Loss, theta_on_omega, y: ObservedMatrix):
    """Entrywise gradient psi'(theta) - y, on the same sparsity pattern as y."""
    theta = np.asarray(theta_on_omega, dtype=np.float64)
    if theta.shape != (y.nnz,):
        raise DataError("theta vector is not aligned with the observed entries")
    validate_responses(loss, y)
    flops.add(2 * y.nnz)
    return y.with_values(loss.psi_prime(theta) - y.values)


def curvature(loss: Loss, theta_range_hint=None):
    """Upper bound on psi'' over the admissible parameter range."""
    if loss.kind == GAUSSIAN:
        return 1.0
    if loss.kind == BERNOULLI:
        return 0.25
    hi = loss.theta_cap
    if theta_range_hint is not None:
        hi = float(theta_range_hint[1])
    if hi is None:
        raise ConfigError("poisson loss needs an explicit upper bound on theta")
    return float(np.exp(hi))


def unit_deviance(loss: Loss, theta, y_values):
    """Per-entry deviance 2 * (nll(theta) - nll(saturated))."""
    theta = np.asarray(theta, dtype=np.float64)
    y = np.asarray(y_values, dtype=np.float64)
    nll = loss.psi(theta) - y * theta
    if loss.kind == GAUSSIAN:
        sat = -0.5 * y * y
    elif loss.kind == BERNOULLI:
        sat = np.zeros_like(y)
    else:
        sat = np.where(y > 0, y - y * np.log(np.maximum(y, 1e-300)), 0.0)
    return 2.0 * (nll - sat)
