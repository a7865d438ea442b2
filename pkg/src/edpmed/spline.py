"""Penalized thin-plate spline basis in age.

The raw basis row at age ``a`` is ``|a - q_d|**3`` for knots ``q_1 < ... < q_D``;
it is post-multiplied by the inverse square root of the penalty matrix
``Omega[f, g] = |q_f - q_g|**3``. ``Omega`` is symmetric with a zero diagonal
and is indefinite, so the inverse square root is taken of its operator
absolute value ``|Omega| = V |Lambda| V^T``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["SplineBasis", "make_basis", "basis_row", "default_knots", "penalty_matrix"]


def penalty_matrix(knots) -> np.ndarray:
    q = np.asarray(knots, dtype=float)
    return np.abs(q[:, None] - q[None, :]) ** 3


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each eigenvector made positive
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


@dataclass(frozen=True, eq=False)
class SplineBasis:
    knots: np.ndarray
    penalty: np.ndarray
    penalty_inv_sqrt: np.ndarray
    eigen_floor: float
    eigenvalues: np.ndarray

    @property
    def D(self) -> int:
        return int(self.knots.size)

    def raw(self, ages) -> np.ndarray:
        a = np.atleast_1d(np.asarray(ages, dtype=float))
        return np.abs(a[:, None] - self.knots[None, :]) ** 3

    def rows(self, ages) -> np.ndarray:
        """Transformed basis rows, shape ``(len(ages), D)``."""
        return self.raw(ages) @ self.penalty_inv_sqrt

    def abs_penalty(self) -> np.ndarray:
        vals, vecs = np.linalg.eigh(self.penalty)
        return (vecs * np.abs(vals)) @ vecs.T

    def to_dict(self) -> dict:
        return {"knots": self.knots.tolist(), "eigen_floor": self.eigen_floor}


def make_basis(knots, eigen_floor: float = 1e-10) -> SplineBasis:
    """Build the basis for strictly increasing ``knots``.

    ``eigen_floor`` is relative: eigenvalue magnitudes below
    ``eigen_floor * max|lambda|`` are raised to that value before
    ``|lambda| ** -0.5`` is applied.
    """
    q = np.asarray(knots, dtype=float).ravel()
    if q.size < 2:
        raise ValueError("at least two knots are required")
    if np.any(np.diff(q) == 0):
        raise ValueError("duplicate knots")
    if np.any(np.diff(q) < 0):
        raise ValueError("knots must be sorted in increasing order")
    if not eigen_floor > 0:
        raise ValueError("eigen_floor must be positive")
    omega = penalty_matrix(q)
    vals, vecs = np.linalg.eigh(omega)
    vecs = _fix_signs(vecs)
    mags = np.maximum(np.abs(vals), eigen_floor * np.max(np.abs(vals)))
    inv_sqrt = (vecs * mags ** -0.5) @ vecs.T
    inv_sqrt = 0.5 * (inv_sqrt + inv_sqrt.T)
    q.setflags(write=False)
    omega.setflags(write=False)
    inv_sqrt.setflags(write=False)
    return SplineBasis(q, omega, inv_sqrt, float(eigen_floor), vals)


def basis_row(basis: SplineBasis, age: float) -> np.ndarray:
    return basis.rows([age])[0]


def default_knots(ages, D: int = 4) -> np.ndarray:
    """Knots at the ``j/(D+1)`` empirical quantiles of the pooled landmark ages.

    ``ages`` may be a :class:`~edpmed.data_model.Cohort` or an array. Quantiles
    are taken with the inverted-CDF rule so each knot is an observed age; a
    knot that collides with its predecessor is moved to the next larger
    distinct observed age.
    """
    from .data_model import Cohort

    if isinstance(ages, Cohort):
        ages = ages.landmark_ages()
    a = np.sort(np.asarray(ages, dtype=float).ravel())
    if D < 2:
        raise ValueError("D must be >= 2")
    uniq = np.unique(a)
    if uniq.size < D:
        raise ValueError(f"need at least {D} distinct landmark ages, found {uniq.size}")
    probs = np.arange(1, D + 1) / (D + 1)
    knots = np.quantile(a, probs, method="inverted_cdf")
    for j in range(1, D):
        if knots[j] <= knots[j - 1]:
            larger = uniq[uniq > knots[j - 1]]
            if larger.size == 0:
                break
            knots[j] = larger[0]
    if np.any(np.diff(knots) <= 0):
        # collisions pushed past the largest age: fall back to the distinct ages
        knots = np.quantile(uniq, probs, method="inverted_cdf")
    if np.any(np.diff(knots) <= 0):
        raise ValueError("could not place distinct knots")
    return knots
