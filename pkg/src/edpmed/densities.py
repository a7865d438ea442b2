"""Log-densities of the within-cluster models."""
from __future__ import annotations

import numpy as np
from scipy.special import log_ndtr

from .data_model import BINARY

__all__ = ["probit_logpmf", "normal_logpdf", "local_logdens", "design_matrix",
           "baseline_logdens"]

_LOG_2PI = np.log(2.0 * np.pi)


def probit_logpmf(y, eta):
    """``log Phi(eta)`` for ``y = 1`` and ``log Phi(-eta)`` for ``y = 0``."""
    y = np.asarray(y)
    return log_ndtr(np.where(y > 0.5, eta, -np.asarray(eta)))


def normal_logpdf(y, mean, var):
    return -0.5 * (_LOG_2PI + np.log(var) + (y - mean) ** 2 / var)


def local_logdens(kind: str, y, eta, var=None):
    if kind == BINARY:
        return probit_logpmf(y, eta)
    return normal_logpdf(y, eta, var)


def design_matrix(baseline, basis_rows) -> np.ndarray:
    """Rows ``[1, l0, B(a)]``; ``baseline`` is ``(n, P)`` and ``basis_rows`` ``(n, D)``."""
    x0 = np.atleast_2d(np.asarray(baseline, dtype=float))
    br = np.atleast_2d(np.asarray(basis_rows, dtype=float))
    return np.hstack([np.ones((br.shape[0], 1)), x0, br])


def baseline_logdens(x, loc, var, binary_mask) -> np.ndarray:
    """Sum over covariates of the locally independent baseline log-densities.

    ``x`` is ``(n, P)``; ``loc`` and ``var`` are ``(..., P)`` cluster
    parameters (mean and variance for continuous covariates, success
    probability for binary ones). Returns ``(n, ...)``.
    """
    x = np.asarray(x, dtype=float)
    n, P = x.shape
    cell_shape = loc.shape[:-1]
    out = np.zeros((n,) + cell_shape)
    if P == 0:
        return out
    flat_loc = loc.reshape(-1, P)
    flat_var = var.reshape(-1, P)
    acc = np.zeros((n, flat_loc.shape[0]))
    for p in range(P):
        xp = x[:, p:p + 1]
        if binary_mask[p]:
            with np.errstate(divide="ignore"):
                acc += np.where(xp > 0.5, np.log(flat_loc[:, p]), np.log1p(-flat_loc[:, p]))
        else:
            acc += normal_logpdf(xp, flat_loc[:, p], flat_var[:, p])
    return acc.reshape((n,) + cell_shape)
