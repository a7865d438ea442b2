"""Piecewise-exponential proportional-hazards survival model.

The baseline hazard is constant on ``[v_{b-1}, v_b)`` for ``b = 1..B`` with
``v_0 = 0``; the last interval is closed at ``v_B``. Covariates act
multiplicatively through ``exp(beta . l0)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "HazardPartition",
    "SurvivalParams",
    "PoissonExpansion",
    "DegenerateLikelihoodError",
    "OutsidePartitionError",
    "cumulative_hazard",
    "survival_prob",
    "expand_poisson",
    "log_likelihood",
    "poisson_kernel",
    "pem_log_likelihood",
    "default_partition",
    "exposure_matrix",
]


class DegenerateLikelihoodError(ArithmeticError):
    """An event falls where the hazard is exactly zero."""


class OutsidePartitionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class HazardPartition:
    cutpoints: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.cutpoints, dtype=float).ravel()
        if v.size < 2:
            raise ValueError("a partition needs at least two cutpoints")
        if v[0] != 0.0:
            raise ValueError("the first cutpoint must be 0")
        if np.any(np.diff(v) <= 0):
            raise ValueError("cutpoints must be strictly increasing")
        v.setflags(write=False)
        object.__setattr__(self, "cutpoints", v)

    @property
    def B(self) -> int:
        return self.cutpoints.size - 1

    @property
    def upper(self) -> float:
        return float(self.cutpoints[-1])

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.cutpoints)

    def check_ages(self, ages) -> np.ndarray:
        a = np.asarray(ages, dtype=float)
        if np.any(a < 0):
            raise OutsidePartitionError("ages must be nonnegative")
        if np.any(a > self.upper):
            raise OutsidePartitionError(
                f"age {float(np.max(a))!r} exceeds the last cutpoint {self.upper!r}")
        return a

    def interval_index(self, ages) -> np.ndarray:
        """0-based interval of each age; ``v_B`` itself maps to the last interval."""
        a = self.check_ages(ages)
        idx = np.searchsorted(self.cutpoints, a, side="right") - 1
        return np.minimum(idx, self.B - 1)

    def to_dict(self) -> dict:
        return {"B": self.B, "cutpoints": self.cutpoints.tolist()}


@dataclass(frozen=True, eq=False)
class SurvivalParams:
    lambdas: np.ndarray
    betas: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=float).ravel()
        beta = np.asarray(self.betas, dtype=float).ravel()
        # zero hazards are allowed so that the no-mortality limit is expressible
        if np.any(~np.isfinite(lam)) or np.any(lam < 0):
            raise ValueError("hazard rates must be finite and nonnegative")
        if np.any(~np.isfinite(beta)):
            raise ValueError("betas must be finite")
        object.__setattr__(self, "lambdas", lam)
        object.__setattr__(self, "betas", beta)


@dataclass(frozen=True, eq=False)
class PoissonExpansion:
    counts: np.ndarray
    exposures: np.ndarray
    means: np.ndarray
    log_rates: np.ndarray  # log(lambda_b) + beta . l0_i, shape (n, B)


def exposure_matrix(ages, cutpoints) -> np.ndarray:
    """Time spent in each interval before ``ages``; shape ``ages.shape + (B,)``."""
    v = np.asarray(cutpoints, dtype=float)
    a = np.asarray(ages, dtype=float)[..., None]
    return np.clip(a - v[:-1], 0.0, np.diff(v))


def _linear(params: SurvivalParams, baseline_covs) -> np.ndarray:
    x = np.asarray(baseline_covs, dtype=float)
    if x.ndim == 0:
        x = x[None]
    if x.shape[-1] != params.betas.size:
        raise ValueError(
            f"expected {params.betas.size} baseline covariates, got {x.shape[-1]}")
    return x @ params.betas


def cumulative_hazard(params: SurvivalParams, partition: HazardPartition,
                      baseline_covs, age):
    """Cumulative hazard at ``age`` (scalar or array) for one covariate vector."""
    if params.lambdas.size != partition.B:
        raise ValueError("lambdas and partition disagree on B")
    a = partition.check_ages(age)
    lam0 = exposure_matrix(a, partition.cutpoints) @ params.lambdas
    out = np.exp(_linear(params, baseline_covs)) * lam0
    return float(out) if np.ndim(out) == 0 else out


def survival_prob(params: SurvivalParams, partition: HazardPartition,
                  baseline_covs, age):
    lam = cumulative_hazard(params, partition, baseline_covs, age)
    return float(np.exp(-lam)) if np.ndim(lam) == 0 else np.exp(-lam)


def expand_poisson(times, events, baseline, partition: HazardPartition,
                   params: SurvivalParams) -> PoissonExpansion:
    """Counts, exposures and Poisson means for the subjects ``(t_i, delta_i, l0_i)``."""
    t = np.asarray(times, dtype=float).ravel()
    d = np.asarray(events, dtype=float).ravel()
    B = partition.B
    if t.size == 0:
        z = np.zeros((0, B))
        return PoissonExpansion(z, z.copy(), z.copy(), z.copy())
    x = np.asarray(baseline, dtype=float).reshape(t.size, -1)
    if d.shape != t.shape:
        raise ValueError("times and events differ in length")
    if not np.all((d == 0) | (d == 1)):
        raise ValueError("event indicators must be 0 or 1")
    idx = partition.interval_index(t)
    counts = np.zeros((t.size, B))
    counts[np.arange(t.size), idx] = d
    H = exposure_matrix(t, partition.cutpoints)
    lp = x @ params.betas
    with np.errstate(divide="ignore"):
        log_rates = np.log(params.lambdas)[None, :] + lp[:, None]
    means = np.exp(lp)[:, None] * H * params.lambdas[None, :]
    return PoissonExpansion(counts, H, means, log_rates)


def log_likelihood(expansion: PoissonExpansion) -> float:
    """Survival log-likelihood from a Poisson expansion.

    Returns ``sum N * log(lambda_b e^{beta l}) - Theta``. This is the Poisson
    kernel ``sum N log Theta - Theta`` minus the parameter-free term
    ``sum N log H``, so it coincides with the piecewise-exponential
    log-likelihood exactly.
    """
    N = expansion.counts
    hit = N > 0
    if np.any(np.isneginf(expansion.log_rates[hit])):
        raise DegenerateLikelihoodError("event in an interval with zero hazard")
    return float(np.sum(N[hit] * expansion.log_rates[hit]) - np.sum(expansion.means))


def poisson_kernel(expansion: PoissonExpansion) -> float:
    """``sum N log Theta - Theta`` with ``0 log 0 = 0``."""
    N = expansion.counts
    hit = N > 0
    H = expansion.exposures[hit]
    log_rate = expansion.log_rates[hit]
    if np.any(H <= 0) or np.any(np.isneginf(log_rate)):
        raise DegenerateLikelihoodError("Poisson mean is zero where a count is observed")
    # log H + log rate stays accurate when the product would underflow
    return float(np.sum(N[hit] * (np.log(H) + log_rate)) - np.sum(expansion.means))


def pem_log_likelihood(times, events, baseline, partition: HazardPartition,
                       params: SurvivalParams) -> float:
    """Direct form ``sum delta (log lambda(t) + beta l) - e^{beta l} Lambda_0(t)``."""
    t = np.asarray(times, dtype=float).ravel()
    if t.size == 0:
        return 0.0
    d = np.asarray(events, dtype=float).ravel()
    x = np.asarray(baseline, dtype=float).reshape(t.size, -1)
    idx = partition.interval_index(t)
    lp = x @ params.betas
    lam_t = params.lambdas[idx]
    ev = d > 0
    if np.any(lam_t[ev] == 0):
        raise DegenerateLikelihoodError("event in an interval with zero hazard")
    lam0 = exposure_matrix(t, partition.cutpoints) @ params.lambdas
    return float(np.sum(np.log(lam_t[ev]) + lp[ev]) - np.sum(np.exp(lp) * lam0))


def default_partition(cohort_or_times, B: int = 5, events=None) -> HazardPartition:
    """Cutpoints at event-age quantiles with ``v_B`` the largest observed age.

    Accepts a :class:`~edpmed.data_model.Cohort`, or arrays of ages and event
    indicators. Quantile cuts that would leave an interval without an event
    are replaced by midpoints between distinct event ages at the same ranks.
    """
    from .data_model import Cohort

    if isinstance(cohort_or_times, Cohort):
        t = np.array([s.event_age for s in cohort_or_times.subjects])
        d = np.array([s.event_indicator for s in cohort_or_times.subjects])
    else:
        t = np.asarray(cohort_or_times, dtype=float).ravel()
        d = np.ones_like(t) if events is None else np.asarray(events, dtype=float).ravel()
    if B < 1:
        raise ValueError("B must be >= 1")
    ev = np.sort(t[d == 1])
    uniq = np.unique(ev)
    if uniq.size < B:
        raise ValueError(f"B={B} intervals need at least {B} distinct event ages, "
                         f"found {uniq.size}")
    top = float(np.max(t))
    if top <= 0:
        raise ValueError("all ages are zero")
    if B == 1:
        return HazardPartition(np.array([0.0, top]))
    cuts = np.quantile(ev, np.arange(1, B) / B)
    v = np.concatenate([[0.0], cuts, [top]])
    if not _covers(v, ev):
        ranks = np.ceil(np.arange(1, B) * uniq.size / B).astype(int)
        cuts = 0.5 * (uniq[ranks - 1] + uniq[ranks])
        v = np.concatenate([[0.0], cuts, [top]])
    return HazardPartition(v)


def _covers(v, ev) -> bool:
    if np.any(np.diff(v) <= 0):
        return False
    idx = np.minimum(np.searchsorted(v, ev, side="right") - 1, v.size - 2)
    return np.unique(idx).size == v.size - 1
