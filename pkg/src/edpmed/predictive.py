"""Predictive quantities of the truncated mixture given a covariate history on an age grid.

Cluster weights combine the stick weights, the baseline-covariate density and
the product over grid ages of the local densities of ``z``, ``l`` and ``m``.
How many grid indices of each process enter is set per process, which covers
both conditioning sets needed downstream: survival weights use every process
through the same index, while the mediator (confounder) weights use the
mediator (confounder) history one index shorter.

The single-history functions wrap a batched kernel that evaluates ``C``
histories at once; G-computation calls the kernel directly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .data_model import BINARY, AgeGrid
from .densities import baseline_logdens, local_logdens
from .state import PROCESSES, ModelSpec, PosteriorState
from .survival import exposure_matrix

__all__ = [
    "History",
    "DegenerateHistoryError",
    "PredictiveKernel",
    "cluster_weights",
    "cell_weights",
    "conditional_survival",
    "conditional_mediator_density",
    "conditional_confounder_density",
    "draw_baseline",
]


class DegenerateHistoryError(ArithmeticError):
    pass


@dataclass(frozen=True)
class History:
    """A covariate history on ``grid``; ``z``, ``l``, ``m`` hold values at ``a_1, a_2, ...``.

    ``random_effects`` is ``(b_m, b_l, b_z)``.
    """

    grid: AgeGrid
    z: Sequence[float] = ()
    l: Sequence[float] = ()
    m: Sequence[float] = ()
    baseline: Sequence[float] = ()
    random_effects: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in PROCESSES:
            v = getattr(self, name)
            if len(v) > self.grid.K:
                raise ValueError(f"history of {name!r} is longer than the grid")
        if any(v not in (0, 1) for v in self.z):
            raise ValueError("exposure values must be 0 or 1")

    def effects(self) -> dict:
        bm, bl, bz = self.random_effects
        return {"m": float(bm), "l": float(bl), "z": float(bz)}


class PredictiveKernel:
    """Per-draw precomputations for evaluating many histories on one grid.

    Parameters
    ----------
    state, spec
        Posterior draw and model specification.
    ages
        Grid ages at which local models are evaluated.
    """

    def __init__(self, state: PosteriorState, spec: ModelSpec, ages):
        self.state = state
        self.spec = spec
        self.ages = np.asarray(ages, dtype=float)
        N, M, P = spec.N, spec.M, spec.P
        self.NM = N * M
        with np.errstate(divide="ignore"):
            self.log_joint = np.log(state.joint_weights()).reshape(self.NM)
        rows = spec.basis.rows(self.ages) if self.ages.size else np.zeros((0, spec.D))
        self.theta = {}
        self.spline = {}
        for p in PROCESSES:
            c = state.coef[p].reshape(self.NM, spec.q)
            self.theta[p] = c[:, :1 + P]
            self.spline[p] = rows @ c[:, 1 + P:].T       # (K, NM)
        self.var = {p: state.sigma2[p].reshape(self.NM) for p in spec.continuous()}
        self.kinds = spec.kinds

    def prior_logw(self, l0) -> np.ndarray:
        """``log xi_r xi_{s|r} + log p(l0 | theta_rs)``, shape ``(C, NM)``."""
        st = self.state
        P = self.spec.P
        return self.log_joint[None, :] + baseline_logdens(
            l0, st.l0_loc.reshape(self.NM, P), st.l0_var.reshape(self.NM, P),
            self.spec.schema.binary_mask())

    def linear0(self, proc, l0, b) -> np.ndarray:
        """Age-free part of the linear predictor plus the random intercept, ``(C, NM)``."""
        x = np.hstack([np.ones((l0.shape[0], 1)), l0])
        return x @ self.theta[proc].T + np.asarray(b, dtype=float).reshape(-1, 1)

    def logdens(self, proc, k, values, lin0) -> np.ndarray:
        eta = lin0 + self.spline[proc][k][None, :]
        y = np.asarray(values, dtype=float).reshape(-1, 1)
        return local_logdens(self.kinds[proc], y, eta, self.var.get(proc))

    def history_logw(self, l0, b: dict, values: dict, through: dict) -> np.ndarray:
        """Joint log-weights of every cell given the first ``through[p]`` values of each process."""
        logw = self.prior_logw(l0)
        for p in PROCESSES:
            kmax = through[p]
            if kmax == 0:
                continue
            lin0 = self.linear0(p, l0, b[p])
            v = np.asarray(values[p], dtype=float)
            v = np.broadcast_to(v, (l0.shape[0], v.shape[-1])) if v.ndim == 1 else v
            for k in range(kmax):
                logw = logw + self.logdens(p, k, v[:, k], lin0)
        return logw

    def outer_failure(self, l0, age) -> np.ndarray:
        """Per-outer-cluster ``1 - exp(-Lambda_r(age | l0))``, shape ``(C, N)``."""
        st = self.state
        a = self.spec.partition.check_ages(age)
        cum = exposure_matrix(a, self.spec.partition.cutpoints) @ st.lambdas.T   # (N,)
        return -np.expm1(-np.exp(l0 @ st.betas.T) * cum[None, :])

    @staticmethod
    def mix_survival(weights, failure) -> np.ndarray:
        # the complement form returns exactly 1 when every hazard is zero
        return np.clip(1.0 - np.sum(weights * failure, axis=-1), 0.0, 1.0)

    def outer_weights(self, logw) -> np.ndarray:
        return _normalise(logw).reshape(logw.shape[0], self.spec.N, self.spec.M).sum(axis=2)


def _normalise(logw) -> np.ndarray:
    top = np.max(logw, axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise DegenerateHistoryError("degenerate history: every cluster weight is zero")
    w = np.exp(logw - top)
    return w / w.sum(axis=-1, keepdims=True)


def _prepare(state, spec, history: History):
    l0 = np.asarray(history.baseline, dtype=float).reshape(1, spec.P)
    kern = PredictiveKernel(state, spec, history.grid.as_array())
    b = history.effects()
    values = {p: np.asarray(getattr(history, p), dtype=float) for p in PROCESSES}
    return kern, l0, b, values


def _through(history, through):
    if through is None:
        return {p: len(getattr(history, p)) for p in PROCESSES}
    return dict(zip(PROCESSES, through)) if not isinstance(through, dict) else through


def cell_weights(state: PosteriorState, spec: ModelSpec, history: History,
                 through=None) -> np.ndarray:
    """Joint ``(N, M)`` cluster weights given a history.

    ``through`` gives the number of grid values of ``z``, ``l`` and ``m`` to
    condition on (a dict or a ``(z, l, m)`` tuple); by default every value the
    history holds is used.
    """
    kern, l0, b, values = _prepare(state, spec, history)
    logw = kern.history_logw(l0, b, values, _through(history, through))
    return _normalise(logw)[0].reshape(spec.N, spec.M)


def cluster_weights(state: PosteriorState, spec: ModelSpec, history: History,
                    through=None) -> np.ndarray:
    """Outer-cluster weights ``w_r``, summing the joint weights over inner clusters."""
    return cell_weights(state, spec, history, through).sum(axis=1)


def conditional_survival(state: PosteriorState, spec: ModelSpec, history: History, age):
    """Mixture survival ``sum_r w_r exp(-Lambda_r(age))`` given the history.

    ``age`` may be a scalar or an array; an array of ages reuses one set of
    cluster weights and returns an array.
    """
    ages = np.asarray(age, dtype=float)
    used = max((len(getattr(history, p)) for p in PROCESSES), default=0)
    if used and ages.size and np.min(ages) < history.grid.ages[used - 1]:
        raise ValueError("age precedes the last grid age in the history")
    kern, l0, b, values = _prepare(state, spec, history)
    w = kern.outer_weights(kern.history_logw(l0, b, values, _through(history, None)))
    if ages.ndim == 0:
        return float(kern.mix_survival(w, kern.outer_failure(l0, float(ages)))[0])
    fail = kern.outer_failure(l0, ages.ravel())              # (A, N)
    return kern.mix_survival(w, fail).reshape(ages.shape)


def _grid_index(history, age, name):
    k = len(getattr(history, name))
    if k >= history.grid.K or not np.isclose(age, history.grid.ages[k]):
        raise ValueError(f"age must equal the next grid age after the {name!r} history")
    return k


def _conditional_density(state, spec, history, age, value, proc, through):
    k = _grid_index(history, age, proc)
    for p, need in through(k).items():
        if len(getattr(history, p)) < need:
            raise ValueError(f"history of {p!r} must reach grid index {need}")
    kern, l0, b, values = _prepare(state, spec, history)
    w = _normalise(kern.history_logw(l0, b, values, through(k)))[0]
    lin0 = kern.linear0(proc, l0, b[proc])
    dens = np.exp(kern.logdens(proc, k, [value], lin0))[0]
    return float(np.sum(w * dens))


def conditional_mediator_density(state: PosteriorState, spec: ModelSpec, history: History,
                                 age: float, value: float) -> float:
    """Mixture density (mass) of ``m`` at the next grid age.

    Weights condition on ``z`` and ``l`` through that age and ``m`` through
    the previous one.
    """
    return _conditional_density(state, spec, history, age, value, "m",
                                lambda k: {"z": k + 1, "l": k + 1, "m": k})


def conditional_confounder_density(state: PosteriorState, spec: ModelSpec, history: History,
                                   age: float, value: float) -> float:
    """Mixture density (mass) of ``l`` at the next grid age.

    Weights condition on ``z`` through that age and ``l``, ``m`` through the
    previous one.
    """
    return _conditional_density(state, spec, history, age, value, "l",
                                lambda k: {"z": k + 1, "l": k, "m": k})


def sample_cells(rng, weights) -> np.ndarray:
    """One categorical draw per row of ``weights`` using a single uniform each."""
    cum = np.cumsum(weights, axis=-1)
    u = rng.random(cum.shape[0]) * cum[:, -1]
    return np.minimum(np.sum(cum <= u[:, None], axis=1), cum.shape[1] - 1)


def draw_baseline(state: PosteriorState, spec: ModelSpec, rng, size: int | None = None):
    """Baseline covariates from ``sum_rs xi_r xi_{s|r} p(l0 | theta_rs)``."""
    C = 1 if size is None else int(size)
    NM = spec.N * spec.M
    w = state.joint_weights().reshape(1, NM)
    cell = sample_cells(rng, np.broadcast_to(w, (C, NM)))
    loc = state.l0_loc.reshape(NM, spec.P)[cell]
    var = state.l0_var.reshape(NM, spec.P)[cell]
    mask = spec.schema.binary_mask()
    u = rng.random((C, spec.P))
    zn = rng.standard_normal((C, spec.P))
    x = np.where(mask[None, :], (u < loc).astype(float), loc + np.sqrt(var) * zn)
    return x[0] if size is None else x


def draw_local(rng, kind, eta, var=None) -> np.ndarray:
    """Sample a local-model outcome for each entry of ``eta``."""
    if kind == BINARY:
        return (rng.random(eta.shape) < ndtr(eta)).astype(float)
    return eta + np.sqrt(var) * rng.standard_normal(eta.shape)
