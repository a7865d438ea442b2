"""Blocked Gibbs sampler for the truncated enriched Dirichlet process mixture.

One sweep updates, in order: cluster memberships; outer-cluster survival
parameters (random-walk Metropolis); inner-cluster regression, spline,
variance and baseline-covariate parameters; outer and inner stick weights;
the optional outer concentration; the inner concentrations; random
intercepts and their variances.

All ``gibbs_step_*`` functions update ``state`` in place and also return the
updated pieces.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize, sparse
from scipy.special import ndtr, ndtri

from .data_model import BINARY, CONTINUOUS, Cohort
from .densities import baseline_logdens, design_matrix, probit_logpmf
from .state import (PROCESSES, SCHEMA_VERSION, ModelSpec, PosteriorState,
                    PriorConfig)
from .survival import exposure_matrix

__all__ = [
    "SamplerError",
    "DegenerateAssignmentError",
    "CenteringFitError",
    "CohortArrays",
    "CenteringFit",
    "centering_fit",
    "default_priors",
    "init_state",
    "MHTuning",
    "ChainConfig",
    "GibbsSampler",
    "assignment_log_probs",
    "gibbs_step_assignments",
    "gibbs_step_beta_params",
    "gibbs_step_theta_params",
    "gibbs_step_sticks",
    "gibbs_step_concentration",
    "gibbs_step_random_effects",
    "normal_coef_posterior",
    "normal_mean_posterior",
    "inverse_gamma_posterior",
    "beta_posterior",
    "random_intercept_posterior",
    "survival_loglik_matrix",
    "PosteriorDrawStore",
    "run_chain",
]

STICK_EPS = 1e-12
PROB_CLAMP = 1e-6


class SamplerError(RuntimeError):
    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"iteration {iteration}: {message}")
        self.iteration = iteration


class DegenerateAssignmentError(ArithmeticError):
    pass


class CenteringFitError(RuntimeError):
    pass


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def _inv_gamma(rng, shape, scale):
    """Draw from IG(shape, scale), i.e. scale / Gamma(shape, 1)."""
    return np.asarray(scale) / rng.standard_gamma(shape)


# --------------------------------------------------------------------------- data

@dataclass(eq=False)
class CohortArrays:
    """Flat numeric view of a cohort in the layout the sampler needs."""

    baseline: np.ndarray       # (n, P)
    t: np.ndarray              # (n,)
    delta: np.ndarray          # (n,)
    obs_subject: np.ndarray    # (n_obs,)
    obs_age: np.ndarray        # (n_obs,)
    X: np.ndarray              # (n_obs, q)
    y: dict                    # process -> (n_obs,)
    H: np.ndarray              # (n, B)
    counts: np.ndarray         # (n, B)
    event_bin: np.ndarray      # (n,)
    S: sparse.csr_matrix       # (n, n_obs) subject membership of each observation
    XX: np.ndarray             # (n_obs, q*q) outer products of design rows
    n_obs_i: np.ndarray        # (n,)

    @property
    def n(self) -> int:
        return self.t.size

    @property
    def n_obs(self) -> int:
        return self.obs_subject.size

    @classmethod
    def build(cls, spec: ModelSpec, baseline, t, delta, obs_subject, obs_age,
              values: dict) -> "CohortArrays":
        t = np.asarray(t, dtype=float).ravel()
        n = t.size
        baseline = np.asarray(baseline, dtype=float).reshape(n, spec.P)
        delta = np.asarray(delta, dtype=float).ravel()
        obs_subject = np.asarray(obs_subject, dtype=np.int64).ravel()
        obs_age = np.asarray(obs_age, dtype=float).ravel()
        n_obs = obs_subject.size
        X = design_matrix(baseline[obs_subject], spec.basis.rows(obs_age)) if n_obs else \
            np.zeros((0, spec.q))
        y = {p: np.asarray(values[p], dtype=float).ravel() for p in PROCESSES}
        if n:
            H = exposure_matrix(t, spec.partition.cutpoints)
            event_bin = spec.partition.interval_index(t)
        else:
            H = np.zeros((0, spec.B))
            event_bin = np.zeros(0, dtype=np.int64)
        counts = np.zeros((n, spec.B))
        counts[np.arange(n), event_bin] = delta
        S = sparse.csr_matrix((np.ones(n_obs), (obs_subject, np.arange(n_obs))),
                              shape=(n, n_obs))
        XX = (X[:, :, None] * X[:, None, :]).reshape(n_obs, spec.q * spec.q)
        n_obs_i = np.bincount(obs_subject, minlength=n).astype(float)
        return cls(baseline, t, delta, obs_subject, obs_age, X, y, H, counts,
                   event_bin, S, XX, n_obs_i)

    @classmethod
    def from_cohort(cls, cohort: Cohort, spec: ModelSpec) -> "CohortArrays":
        subj, ages = [], []
        vals = {p: [] for p in PROCESSES}
        for i, s in enumerate(cohort.subjects):
            for lm in s.landmarks:
                subj.append(i)
                ages.append(lm.age)
                vals["z"].append(lm.z)
                vals["l"].append(lm.l)
                vals["m"].append(lm.m)
        return cls.build(
            spec,
            np.array([s.baseline for s in cohort.subjects], dtype=float).reshape(cohort.n, -1),
            [s.event_age for s in cohort.subjects],
            [s.event_indicator for s in cohort.subjects],
            subj, ages, vals,
        )

    @classmethod
    def empty(cls, spec: ModelSpec) -> "CohortArrays":
        return cls.build(spec, np.zeros((0, spec.P)), [], [], [], [],
                         {p: [] for p in PROCESSES})


# ---------------------------------------------------------------- centering fits

@dataclass
class CenteringFit:
    beta_mean: np.ndarray
    beta_var: np.ndarray
    log_lambda: np.ndarray
    coef_mean: dict
    coef_var: dict
    resid_var: dict


def _fit_pem(data: CohortArrays, max_iter: int = 100):
    B, P = data.H.shape[1], data.baseline.shape[1]
    D = data.counts.sum(axis=0)
    E = data.H.sum(axis=0)
    if np.any(D == 0):
        raise CenteringFitError("global survival fit: a hazard interval contains no events")
    x0 = np.concatenate([np.log(D / E), np.zeros(P)])
    Z = data.baseline
    N = data.counts
    H = data.H

    def parts(x):
        u, beta = x[:B], x[B:]
        mu = np.exp(u[None, :] + (Z @ beta)[:, None]) * H
        return u, beta, mu

    def f(x):
        u, beta, mu = parts(x)
        return -(np.sum(N * (u[None, :] + (Z @ beta)[:, None])) - mu.sum())

    def grad(x):
        _, _, mu = parts(x)
        r = N - mu
        return -np.concatenate([r.sum(axis=0), Z.T @ r.sum(axis=1)])

    def hess(x):
        _, _, mu = parts(x)
        h = np.zeros((B + P, B + P))
        h[:B, :B] = np.diag(mu.sum(axis=0))
        cross = Z.T @ mu
        h[B:, :B] = cross
        h[:B, B:] = cross.T
        h[B:, B:] = (Z * mu.sum(axis=1)[:, None]).T @ Z
        return h

    res = optimize.minimize(f, x0, jac=grad, hess=hess, method="trust-exact",
                            options={"maxiter": max_iter, "gtol": 1e-8})
    # trust-exact can stop on round-off at the optimum; judge by the gradient
    if not (res.success or np.max(np.abs(grad(res.x))) < 1e-6 * max(1.0, N.sum())):
        raise CenteringFitError(f"global survival fit did not converge: {res.message}")
    cov = np.linalg.inv(hess(res.x))
    return res.x[:B], res.x[B:], np.diag(cov)[B:]


def _fit_ols(X, y):
    n, q = X.shape
    if n <= q:
        raise CenteringFitError(f"global linear fit needs more than {q} observations, got {n}")
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < q:
        raise CenteringFitError("global linear fit: design matrix is rank deficient")
    resid = y - X @ coef
    s2 = float(resid @ resid / (n - q))
    s2 = max(s2, 1e-12)
    var = s2 * np.diag(np.linalg.inv(X.T @ X))
    return coef, var, s2


def _fit_probit(X, y, max_iter: int = 100, tol: float = 1e-8):
    """Probit maximum likelihood by iteratively reweighted least squares.

    The working linear predictor is clamped to ``Phi^-1`` of ``[1e-6, 1 - 1e-6]``
    so that separated or all-equal outcomes converge to a finite fit whose
    probabilities stay of order ``1e-6`` away from 0 and 1.
    """
    n, q = X.shape
    if n == 0:
        raise CenteringFitError("global probit fit has no observations")
    lo, hi = ndtri(PROB_CLAMP), ndtri(1 - PROB_CLAMP)
    coef = np.zeros(q)
    for _ in range(max_iter):
        eta = np.clip(X @ coef, lo, hi)
        mu = ndtr(eta)
        dens = np.exp(-0.5 * eta ** 2) / math.sqrt(2 * math.pi)
        w = dens ** 2 / (mu * (1 - mu))
        zwork = eta + (y - mu) / dens
        XtW = X.T * w
        try:
            new = np.linalg.solve(XtW @ X, XtW @ zwork)
        except np.linalg.LinAlgError as exc:
            raise CenteringFitError("global probit fit: singular information matrix") from exc
        if np.max(np.abs(new - coef)) < tol:
            coef = new
            break
        coef = new
    else:
        raise CenteringFitError(f"global probit fit did not converge in {max_iter} iterations")
    eta = np.clip(X @ coef, lo, hi)
    mu = ndtr(eta)
    dens = np.exp(-0.5 * eta ** 2) / math.sqrt(2 * math.pi)
    w = dens ** 2 / (mu * (1 - mu))
    var = np.diag(np.linalg.inv((X.T * w) @ X))
    return coef, var


def centering_fit(data: CohortArrays, spec: ModelSpec) -> CenteringFit:
    """Whole-data maximum-likelihood fits that centre the base measures."""
    log_lam, beta, beta_var = _fit_pem(data)
    coef_mean, coef_var, resid_var = {}, {}, {}
    for p in PROCESSES:
        if spec.kinds[p] == CONTINUOUS:
            coef_mean[p], coef_var[p], resid_var[p] = _fit_ols(data.X, data.y[p])
        else:
            coef_mean[p], coef_var[p] = _fit_probit(data.X, data.y[p])
    return CenteringFit(beta, beta_var, log_lam, coef_mean, coef_var, resid_var)


def default_priors(data: CohortArrays, spec: ModelSpec, fit: CenteringFit | None = None,
                   **overrides) -> PriorConfig:
    """Base measures centred on whole-data fits, inflated by ``c = n / 5``."""
    if fit is None:
        fit = centering_fit(data, spec)
    n = data.n
    c = overrides.pop("c", n / 5.0)
    events = data.delta.sum()
    if events == 0:
        raise CenteringFitError("no observed events: cannot set the hazard prior")
    # event rate over follow-up from the first landmark, not from birth
    entry = np.full(n, np.inf)
    np.minimum.at(entry, data.obs_subject, data.obs_age)
    exposure = float(np.sum(data.t - np.minimum(entry, data.t)))
    if exposure <= 0.0:
        exposure = float(data.t.sum())
    lam_star = overrides.pop("lambda_star", float(events / exposure))
    # prior shape about one per interval of average length
    mean_len = float(np.mean(spec.partition.lengths))
    w = overrides.pop("w", 1.0 / (lam_star * mean_len))
    w_B = overrides.pop("w_B", 1.0 / lam_star)
    sigma2 = {p: (2.0, fit.resid_var[p]) for p in spec.continuous()}
    re = {p: (2.0, 0.5 * fit.resid_var[p]) if spec.kinds[p] == CONTINUOUS else (3.0, 0.5)
          for p in PROCESSES}
    mask = spec.schema.binary_mask()
    x = data.baseline
    mean = x.mean(axis=0) if n else np.zeros(spec.P)
    var = np.maximum(x.var(axis=0, ddof=1) if n > 1 else np.ones(spec.P), 1e-6)
    l0_mean = np.where(mask, np.nan, mean)
    l0_mean_var = np.where(mask, np.nan, c * var / max(n, 1))
    l0_a = np.where(mask, 1.0, 2.0)
    l0_b = np.where(mask, 1.0, var)
    kw = dict(
        c=c, lambda_star=lam_star, w=w, w_B=w_B,
        beta_mean=fit.beta_mean, beta_var0=np.maximum(fit.beta_var, 1e-12),
        coef_mean=fit.coef_mean,
        coef_var0={p: np.maximum(v, 1e-12) for p, v in fit.coef_var.items()},
        sigma2=sigma2, re_sigma2=re,
        l0_mean=l0_mean, l0_mean_var=l0_mean_var, l0_a=l0_a, l0_b=l0_b,
    )
    kw.update(overrides)
    return PriorConfig(**kw)


# ------------------------------------------------------------------ init state

def _prior_survival(rng, spec, priors, size):
    shape, rate = priors.lambda_prior(spec.partition)
    lam = rng.gamma(shape, 1.0 / rate, size=(size, spec.B))
    lam = np.maximum(lam, 1e-300)
    beta = priors.beta_mean + np.sqrt(priors.beta_prior_var()) * \
        rng.standard_normal((size, spec.P))
    return lam, beta


def _prior_coef(rng, priors, proc, size):
    mu0 = priors.coef_mean[proc]
    return mu0 + np.sqrt(priors.coef_prior_var(proc)) * rng.standard_normal((size, mu0.size))


def _prior_l0(rng, spec, priors, size):
    mask = spec.schema.binary_mask()
    P = spec.P
    loc = np.empty((size, P))
    var = np.ones((size, P))
    for p in range(P):
        if mask[p]:
            loc[:, p] = rng.beta(priors.l0_a[p], priors.l0_b[p], size=size)
        else:
            loc[:, p] = priors.l0_mean[p] + math.sqrt(priors.l0_mean_var[p]) * \
                rng.standard_normal(size)
            var[:, p] = _inv_gamma(rng, np.full(size, priors.l0_a[p]), priors.l0_b[p])
    return _clamp_prob(loc, mask), var


def _clamp_prob(loc, mask):
    if np.any(mask):
        loc[..., mask] = np.clip(loc[..., mask], STICK_EPS, 1 - STICK_EPS)
    return loc


def _prior_sticks(rng, alpha, shape):
    v = rng.beta(1.0, np.broadcast_to(alpha, shape[:-1] + (1,)) * np.ones(shape))
    v[..., -1] = 1.0
    return v


def init_state(data: CohortArrays, spec: ModelSpec, priors: PriorConfig, seed=None) -> PosteriorState:
    """Uniform memberships and parameters drawn from their base measures."""
    rng = _rng(seed)
    N, M, n = spec.N, spec.M, data.n
    v_beta = rng.integers(0, N, size=n)
    v_theta = rng.integers(0, M, size=n)
    alpha_theta = rng.gamma(priors.a_theta, 1.0 / priors.b_theta, size=N)
    outer = _prior_sticks(rng, priors.alpha_beta, (N,))
    inner = _prior_sticks(rng, alpha_theta[:, None], (N, M))
    lam, beta = _prior_survival(rng, spec, priors, N)
    coef = {p: _prior_coef(rng, priors, p, N * M).reshape(N, M, spec.q) for p in PROCESSES}
    sigma2 = {p: _inv_gamma(rng, np.full(N * M, priors.sigma2[p][0]),
                            priors.sigma2[p][1]).reshape(N, M)
              for p in spec.continuous()}
    loc, var = _prior_l0(rng, spec, priors, N * M)
    sigma2_b = {p: float(_inv_gamma(rng, priors.re_sigma2[p][0], priors.re_sigma2[p][1]))
                for p in PROCESSES}
    b = {p: math.sqrt(sigma2_b[p]) * rng.standard_normal(n) for p in PROCESSES}
    return PosteriorState(
        v_beta=v_beta, v_theta=v_theta, outer_sticks=outer, inner_sticks=inner,
        lambdas=lam, betas=beta, coef=coef, sigma2=sigma2,
        l0_loc=loc.reshape(N, M, spec.P), l0_var=var.reshape(N, M, spec.P),
        b=b, sigma2_b=sigma2_b, alpha_beta=float(priors.alpha_beta), alpha_theta=alpha_theta,
    )


# ------------------------------------------------------------------ MH tuning

@dataclass
class _Block:
    scale: np.ndarray
    win_acc: np.ndarray
    win_try: np.ndarray
    log_acc: float = 0.0
    log_try: float = 0.0
    tot_acc: float = 0.0
    tot_try: float = 0.0


class MHTuning:
    """Random-walk scales per block and unit, with burn-in adaptation toward a target rate."""

    def __init__(self, target: float = 0.35, adapt: bool = True,
                 min_scale: float = 1e-4, max_scale: float = 1e3):
        self.target = target
        self.adapt_enabled = adapt
        self.min_scale = min_scale
        self.max_scale = max_scale
        self.blocks: dict[str, _Block] = {}

    def scale(self, name: str, shape, initial: float) -> np.ndarray:
        blk = self.blocks.get(name)
        if blk is None or blk.scale.shape != tuple(np.atleast_1d(shape)):
            blk = _Block(np.full(shape, float(initial)), np.zeros(shape), np.zeros(shape))
            self.blocks[name] = blk
        return blk.scale

    def record(self, name: str, accepted, tried) -> None:
        blk = self.blocks[name]
        accepted = np.asarray(accepted, dtype=float)
        tried = np.asarray(tried, dtype=float)
        blk.win_acc += accepted * tried
        blk.win_try += tried
        a, t = float(np.sum(accepted * tried)), float(np.sum(tried))
        blk.log_acc += a
        blk.log_try += t
        blk.tot_acc += a
        blk.tot_try += t

    def adapt(self) -> None:
        if not self.adapt_enabled:
            return
        for blk in self.blocks.values():
            seen = blk.win_try > 0
            rate = np.where(seen, blk.win_acc / np.maximum(blk.win_try, 1), self.target)
            blk.scale *= np.exp(2.0 * (rate - self.target))
            np.clip(blk.scale, self.min_scale, self.max_scale, out=blk.scale)
            blk.win_acc[:] = 0
            blk.win_try[:] = 0

    def reset_totals(self) -> None:
        for blk in self.blocks.values():
            blk.tot_acc = blk.tot_try = 0.0
            blk.win_acc[:] = 0
            blk.win_try[:] = 0

    def drain_log(self) -> list[tuple[str, float, float]]:
        rows = []
        for name in sorted(self.blocks):
            blk = self.blocks[name]
            rows.append((name, blk.log_acc, blk.log_try))
            blk.log_acc = blk.log_try = 0.0
        return rows

    def rates(self) -> dict[str, float]:
        return {k: (b.tot_acc / b.tot_try if b.tot_try else float("nan"))
                for k, b in sorted(self.blocks.items())}


def _tuning(tuning):
    return MHTuning(adapt=False) if tuning is None else tuning


# ------------------------------------------------------------- step 1: memberships

def survival_loglik_matrix(state: PosteriorState, data: CohortArrays) -> np.ndarray:
    """``(n, N)`` piecewise-exponential log-likelihood of each subject under each outer cluster."""
    lp = data.baseline @ state.betas.T
    cum = data.H @ state.lambdas.T
    with np.errstate(divide="ignore"):
        log_lam = np.log(state.lambdas[:, data.event_bin].T)
    ev = data.delta[:, None] > 0
    return np.where(ev, log_lam + lp, 0.0) - np.exp(lp) * cum


def _process_loglik_cells(state, data, spec, proc) -> np.ndarray:
    """``(n, N*M)`` summed log-density of one process's observations under every cell."""
    NM = spec.N * spec.M
    coef = state.coef[proc].reshape(NM, spec.q)
    eta = data.X @ coef.T + state.b[proc][data.obs_subject][:, None]
    y = data.y[proc][:, None]
    if spec.kinds[proc] == BINARY:
        ll = probit_logpmf(y, eta)
    else:
        var = state.sigma2[proc].reshape(NM)[None, :]
        ll = -0.5 * (np.log(2 * np.pi * var) + (y - eta) ** 2 / var)
    return np.asarray(data.S @ ll)


def assignment_log_probs(state: PosteriorState, data: CohortArrays, spec: ModelSpec,
                         survival_lik_power: float = 1.0) -> np.ndarray:
    """Unnormalised ``log p_{i,r,s|r}``, shape ``(n, N*M)``, cells ordered ``r * M + s``."""
    N, M = spec.N, spec.M
    with np.errstate(divide="ignore"):
        logw = np.log(state.joint_weights()).reshape(N * M)
    surv = survival_loglik_matrix(state, data)
    out = logw[None, :] + survival_lik_power * np.repeat(surv, M, axis=1)
    for p in PROCESSES:
        out += _process_loglik_cells(state, data, spec, p)
    out += baseline_logdens(data.baseline, state.l0_loc.reshape(N * M, -1),
                            state.l0_var.reshape(N * M, -1), spec.schema.binary_mask())
    return out


def _categorical(rng, logp) -> np.ndarray:
    top = logp.max(axis=1, keepdims=True)
    bad = ~np.isfinite(top[:, 0])
    if np.any(bad):
        raise DegenerateAssignmentError(
            f"degenerate assignment: subject {int(np.flatnonzero(bad)[0])} has zero "
            "probability under every cluster")
    cum = np.cumsum(np.exp(logp - top), axis=1)
    u = rng.random(logp.shape[0]) * cum[:, -1]
    idx = np.sum(cum <= u[:, None], axis=1)
    return np.minimum(idx, logp.shape[1] - 1)


def gibbs_step_assignments(state, data, spec, rng, survival_lik_power: float = 1.0):
    if data.n == 0:
        return state.v_beta, state.v_theta
    cell = _categorical(rng, assignment_log_probs(state, data, spec, survival_lik_power))
    state.v_beta, state.v_theta = np.divmod(cell, spec.M)
    return state.v_beta, state.v_theta


# --------------------------------------------------------- step 2: survival params

def _onehot(index, size, n) -> np.ndarray:
    return (index[None, :] == np.arange(size)[:, None]).astype(float) if n else np.zeros((size, 0))


def gibbs_step_beta_params(state, data, spec, priors, rng, tuning=None,
                           update_lambda: bool = True, survival_lik_power: float = 1.0):
    """Coordinate-wise random-walk Metropolis on ``log lambda_b`` and ``beta_p``.

    Empty outer clusters are refreshed from the base measure.
    """
    tuning = _tuning(tuning)
    N, B, P = spec.N, spec.B, spec.P
    occ = np.bincount(state.v_beta, minlength=N) > 0
    onehot = _onehot(state.v_beta, N, data.n)
    v = state.v_beta
    w = survival_lik_power
    lam, beta = state.lambdas, state.betas
    lp = np.einsum("ip,ip->i", data.baseline, beta[v]) if data.n else np.zeros(0)

    if update_lambda:
        shape, rate = priors.lambda_prior(spec.partition)
        Dc = onehot @ data.counts
        Ec = onehot @ (np.exp(lp)[:, None] * data.H)
        sc = tuning.scale("lambda", (N, B), 0.3)
        eps = rng.standard_normal((N, B))
        logu = np.log(rng.random((N, B)))
        for bb in range(B):
            u = np.log(lam[:, bb])
            u_new = u + sc[:, bb] * eps[:, bb]
            a = shape[bb] + w * Dc[:, bb]
            r = rate[bb] + w * Ec[:, bb]
            ratio = a * (u_new - u) - r * (np.exp(u_new) - np.exp(u))
            acc = (logu[:, bb] < ratio) & occ & (u_new != u)
            lam[acc, bb] = np.exp(u_new[acc])
            tuning.record("lambda", acc[:, None] * (np.arange(B) == bb), occ[:, None] *
                          (np.arange(B) == bb))

    if P:
        mean0, var0 = priors.beta_mean, priors.beta_prior_var()
        cum = np.einsum("ib,ib->i", data.H, lam[v]) if data.n else np.zeros(0)
        sc = tuning.scale("beta", (N, P), 0.1)
        eps = rng.standard_normal((N, P))
        logu = np.log(rng.random((N, P)))
        for p in range(P):
            step = sc[:, p] * eps[:, p]
            lp_new = lp + data.baseline[:, p] * step[v]
            ll_i = data.delta * (lp_new - lp) - (np.exp(lp_new) - np.exp(lp)) * cum
            dll = onehot @ ll_i
            b_old = beta[:, p]
            b_new = b_old + step
            dlp = -0.5 * ((b_new - mean0[p]) ** 2 - (b_old - mean0[p]) ** 2) / var0[p]
            acc = (logu[:, p] < w * dll + dlp) & occ & (step != 0)
            beta[acc, p] = b_new[acc]
            lp = np.where(acc[v], lp_new, lp) if data.n else lp
            tuning.record("beta", acc[:, None] * (np.arange(P) == p), occ[:, None] *
                          (np.arange(P) == p))

    lam_prior, beta_prior = _prior_survival(rng, spec, priors, N)
    empty = ~occ
    if update_lambda:
        lam[empty] = lam_prior[empty]
    beta[empty] = beta_prior[empty]
    return lam, beta


# ----------------------------------------------------------- step 3: theta params

def normal_coef_posterior(XtX, Xty, sigma2, mean0, var0):
    """Mean and covariance of coefficients under a ``N(mean0, diag(var0))`` prior.

    Batched over leading axes: ``XtX`` is ``(..., q, q)``, ``Xty`` ``(..., q)``
    and ``sigma2`` ``(...)``.
    """
    s2 = np.asarray(sigma2, dtype=float)[..., None]
    prec = XtX / s2[..., None] + np.diag(1.0 / var0)
    rhs = Xty / s2 + mean0 / var0
    cov = np.linalg.inv(prec)
    return np.einsum("...ij,...j->...i", cov, rhs), cov


def normal_mean_posterior(sum_x, n, var, mean0, var0):
    """Mean and variance of a normal mean with known variance ``var`` and ``N(mean0, var0)`` prior."""
    prec = n / var + 1.0 / var0
    return (sum_x / var + mean0 / var0) / prec, 1.0 / prec


def inverse_gamma_posterior(shape0, scale0, n, ss):
    """IG update for a variance given ``n`` zero-mean residuals with sum of squares ``ss``."""
    return shape0 + 0.5 * n, scale0 + 0.5 * ss


def beta_posterior(a0, b0, successes, n):
    return a0 + successes, b0 + n - successes


def random_intercept_posterior(resid_over_var, inv_var_sum, sigma2_b):
    """Normal full conditional of a random intercept from summed ``r/s2`` and ``1/s2`` terms."""
    prec = inv_var_sum + 1.0 / sigma2_b
    return resid_over_var / prec, 1.0 / prec


def _mvn_from_precision(rng, mean, prec):
    L = np.linalg.cholesky(prec)
    z = rng.standard_normal(mean.shape)
    return mean + np.linalg.solve(np.swapaxes(L, -1, -2), z[..., None])[..., 0]


def gibbs_step_theta_params(state, data, spec, priors, rng, tuning=None, kappa: float = 0.5):
    """Inner-cluster parameters; unoccupied cells are drawn from the base measure."""
    tuning = _tuning(tuning)
    N, M, q = spec.N, spec.M, spec.q
    NM = N * M
    cells = state.cells()
    obs_cell = cells[data.obs_subject]
    n_obs_c = np.bincount(obs_cell, minlength=NM).astype(float)
    W = sparse.csr_matrix((np.ones(data.n_obs), (obs_cell, np.arange(data.n_obs))),
                          shape=(NM, data.n_obs))
    XtX = np.asarray(W @ data.XX).reshape(NM, q, q)
    X = data.X

    for proc in PROCESSES:
        mu0 = priors.coef_mean[proc]
        V0 = priors.coef_prior_var(proc)
        coef = state.coef[proc].reshape(NM, q)
        b_obs = state.b[proc][data.obs_subject]
        y = data.y[proc]
        if spec.kinds[proc] == CONTINUOUS:
            r = y - b_obs
            Xty = np.asarray(W @ (X * r[:, None]))
            s2 = state.sigma2[proc].reshape(NM)
            prec = XtX / s2[:, None, None] + np.diag(1.0 / V0)
            rhs = Xty / s2[:, None] + mu0 / V0
            mean = np.linalg.solve(prec, rhs[..., None])[..., 0]
            coef[:] = _mvn_from_precision(rng, mean, prec)
            resid = r - np.einsum("oq,oq->o", X, coef[obs_cell])
            rss = np.bincount(obs_cell, weights=resid ** 2, minlength=NM)
            shape, scale = inverse_gamma_posterior(*priors.sigma2[proc], n_obs_c, rss)
            s2[:] = _inv_gamma(rng, shape, scale)
            state.sigma2[proc] = s2.reshape(N, M)
        else:
            occ = n_obs_c > 0
            prec_prop = kappa * XtX + np.diag(1.0 / V0)
            L = np.linalg.cholesky(prec_prop)
            sc = tuning.scale(f"theta_{proc}", (NM,), 2.38 / math.sqrt(q))
            z = rng.standard_normal((NM, q))
            step = np.linalg.solve(np.swapaxes(L, -1, -2), z[..., None])[..., 0] * sc[:, None]
            prop = coef + step
            eta_cur = np.einsum("oq,oq->o", X, coef[obs_cell]) + b_obs
            eta_new = np.einsum("oq,oq->o", X, prop[obs_cell]) + b_obs
            dll = np.bincount(obs_cell, weights=probit_logpmf(y, eta_new) -
                              probit_logpmf(y, eta_cur), minlength=NM)
            dlp = -0.5 * np.sum(((prop - mu0) ** 2 - (coef - mu0) ** 2) / V0, axis=1)
            logu = np.log(rng.random(NM))
            acc = occ & (logu < dll + dlp)
            fresh = _prior_coef(rng, priors, proc, NM)
            coef[acc] = prop[acc]
            coef[~occ] = fresh[~occ]
            tuning.record(f"theta_{proc}", acc, occ)
        state.coef[proc] = coef.reshape(N, M, q)

    _update_baseline_params(state, data, spec, priors, rng, cells)
    return state.coef


def _update_baseline_params(state, data, spec, priors, rng, cells):
    N, M, P = spec.N, spec.M, spec.P
    NM = N * M
    mask = spec.schema.binary_mask()
    n_c = np.bincount(cells, minlength=NM).astype(float)
    loc = state.l0_loc.reshape(NM, P)
    var = state.l0_var.reshape(NM, P)
    for p in range(P):
        x = data.baseline[:, p]
        sx = np.bincount(cells, weights=x, minlength=NM)
        if mask[p]:
            loc[:, p] = rng.beta(*beta_posterior(priors.l0_a[p], priors.l0_b[p], sx, n_c))
        else:
            sxx = np.bincount(cells, weights=x ** 2, minlength=NM)
            mean, v = normal_mean_posterior(sx, n_c, var[:, p], priors.l0_mean[p],
                                            priors.l0_mean_var[p])
            mu = mean + rng.standard_normal(NM) * np.sqrt(v)
            ss = np.maximum(sxx - 2 * mu * sx + n_c * mu ** 2, 0.0)
            loc[:, p] = mu
            var[:, p] = _inv_gamma(rng, *inverse_gamma_posterior(priors.l0_a[p], priors.l0_b[p],
                                                                 n_c, ss))
    state.l0_loc = _clamp_prob(loc, mask).reshape(N, M, P)
    state.l0_var = var.reshape(N, M, P)


# ----------------------------------------------------- steps 4-7: sticks, masses

def gibbs_step_sticks(state, rng):
    """Outer then inner stick updates; closure sticks stay at 1."""
    N, M = state.N, state.M
    n_r = np.bincount(state.v_beta, minlength=N).astype(float)
    tail = np.cumsum(n_r[::-1])[::-1]
    after = np.append(tail[1:], 0.0)
    outer = np.ones(N)
    if N > 1:
        outer[:-1] = rng.beta(n_r[:-1] + 1.0, state.alpha_beta + after[:-1])
    n_rs = np.bincount(state.cells(), minlength=N * M).reshape(N, M).astype(float)
    tail = np.cumsum(n_rs[:, ::-1], axis=1)[:, ::-1]
    after = np.concatenate([tail[:, 1:], np.zeros((N, 1))], axis=1)
    inner = np.ones((N, M))
    if M > 1:
        inner[:, :-1] = rng.beta(n_rs[:, :-1] + 1.0, state.alpha_theta[:, None] + after[:, :-1])
    state.outer_sticks, state.inner_sticks = outer, inner
    return state.sticks


def gibbs_step_concentration(state, priors, rng, update_alpha_beta: bool = False):
    """Inner masses ``alpha_r ~ Gamma(M + a - 1, b - sum_{s<M} log(1 - xi'_{s|r}))``."""
    N, M = state.N, state.M
    if update_alpha_beta:
        v = np.clip(state.outer_sticks[:-1], STICK_EPS, 1 - STICK_EPS)
        rate = priors.b_beta - np.sum(np.log1p(-v))
        state.alpha_beta = float(rng.gamma(N + priors.a_beta - 1.0, 1.0 / rate))
    v = np.clip(state.inner_sticks[:, :-1], STICK_EPS, 1 - STICK_EPS)
    rate = priors.b_theta - np.sum(np.log1p(-v), axis=1)
    state.alpha_theta = rng.gamma(M + priors.a_theta - 1.0, 1.0 / rate)
    return state.alpha_theta


# ------------------------------------------------------- step 8: random effects

def gibbs_step_random_effects(state, data, spec, priors, rng, tuning=None):
    """Conjugate normal for continuous processes, random-walk Metropolis for probit ones."""
    tuning = _tuning(tuning)
    n = data.n
    cells = state.cells()
    obs_cell = cells[data.obs_subject]
    NM = spec.N * spec.M
    for proc in PROCESSES:
        coef = state.coef[proc].reshape(NM, spec.q)
        eta0 = np.einsum("oq,oq->o", data.X, coef[obs_cell])
        y = data.y[proc]
        a, bb = priors.re_sigma2[proc]
        s2b = state.sigma2_b[proc]
        b = state.b[proc]
        if spec.kinds[proc] == CONTINUOUS:
            s2 = state.sigma2[proc].reshape(NM)[obs_cell]
            mean, v = random_intercept_posterior(data.S @ ((y - eta0) / s2), data.S @ (1.0 / s2),
                                                 s2b)
            b = mean + rng.standard_normal(n) * np.sqrt(v)
            state.sigma2_b[proc] = float(_inv_gamma(rng, *inverse_gamma_posterior(a, bb, n, b @ b)))
        else:
            sc = tuning.scale(f"b_{proc}", (n,), 0.5)
            prop = b + sc * rng.standard_normal(n)
            dll = data.S @ (probit_logpmf(y, eta0 + prop[data.obs_subject]) -
                            probit_logpmf(y, eta0 + b[data.obs_subject]))
            dlp = 0.5 * (b ** 2 - prop ** 2) / s2b
            acc = np.log(rng.random(n)) < dll + dlp
            b = np.where(acc, prop, b)
            tuning.record(f"b_{proc}", acc, np.ones(n))
            sc = tuning.scale(f"sigma2_b_{proc}", (1,), 0.5)
            u = math.log(s2b)
            u_new = u + sc[0] * rng.standard_normal()
            ss = float(b @ b)
            shape, scale = a + 0.5 * n, bb + 0.5 * ss
            ratio = -shape * (u_new - u) - scale * (math.exp(-u_new) - math.exp(-u))
            ok = math.log(rng.random()) < ratio
            if ok:
                state.sigma2_b[proc] = math.exp(u_new)
            tuning.record(f"sigma2_b_{proc}", np.array([ok]), np.ones(1))
        state.b[proc] = b
    return state.b, state.sigma2_b


# ----------------------------------------------------------------- the chain

@dataclass
class ChainConfig:
    burn_in: int = 1000
    keep: int = 1000
    adapt: bool = True
    thin: int = 1
    update_alpha_beta: bool = False
    adapt_every: int = 50
    target_accept: float = 0.35
    log_every: int = 100

    def __post_init__(self):
        if self.burn_in < 0 or self.keep < 0 or self.thin < 1:
            raise ValueError("burn_in and keep must be >= 0 and thin >= 1")


class GibbsSampler:
    """One chain's sweep loop.

    ``survival_lik_power`` multiplies the survival log-likelihood in every
    step that uses it; values other than 1 give a deliberately wrong sampler
    for validation tests.
    """

    def __init__(self, data: CohortArrays, spec: ModelSpec, priors: PriorConfig,
                 rng: np.random.Generator, config: ChainConfig | None = None,
                 survival_lik_power: float = 1.0):
        self.data = data
        self.spec = spec
        self.priors = priors
        self.rng = rng
        self.config = config or ChainConfig()
        self.tuning = MHTuning(self.config.target_accept, self.config.adapt)
        self.survival_lik_power = survival_lik_power

    def sweep(self, state: PosteriorState) -> PosteriorState:
        d, s, pr, rng, tu = self.data, self.spec, self.priors, self.rng, self.tuning
        w = self.survival_lik_power
        gibbs_step_assignments(state, d, s, rng, w)
        gibbs_step_beta_params(state, d, s, pr, rng, tu, survival_lik_power=w)
        gibbs_step_theta_params(state, d, s, pr, rng, tu)
        gibbs_step_sticks(state, rng)
        gibbs_step_concentration(state, pr, rng, self.config.update_alpha_beta)
        gibbs_step_random_effects(state, d, s, pr, rng, tu)
        return state


@dataclass(eq=False)
class PosteriorDrawStore:
    spec: ModelSpec
    states: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    chains: list = field(default_factory=list)
    acceptance: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    rates: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.states)

    def append(self, state: PosteriorState, iteration: int, chain: int = 0) -> None:
        self.states.append(state)
        self.iterations.append(int(iteration))
        self.chains.append(int(chain))

    def extend(self, other: "PosteriorDrawStore") -> None:
        self.states += other.states
        self.iterations += other.iterations
        self.chains += other.chains
        self.acceptance += other.acceptance
        self.trace += other.trace

    def write_jsonl(self, path) -> Path:
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            for st, it, ch in zip(self.states, self.iterations, self.chains):
                rec = {"schema_version": SCHEMA_VERSION, "chain": ch, "iteration": it,
                       "state": st.to_dict()}
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
        return path

    @classmethod
    def read_jsonl(cls, path, spec: ModelSpec) -> "PosteriorDrawStore":
        store = cls(spec)
        with Path(path).open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                if rec.get("schema_version") != SCHEMA_VERSION:
                    raise ValueError(f"{path}:{lineno}: unsupported draw schema version "
                                     f"{rec.get('schema_version')!r}")
                store.append(PosteriorState.from_dict(rec["state"]), rec["iteration"],
                             rec.get("chain", 0))
        return store


def run_chain(data, spec: ModelSpec, priors: PriorConfig, config: ChainConfig | None = None,
              seed=0, chain: int = 0, state: PosteriorState | None = None) -> PosteriorDrawStore:
    """Run ``burn_in + keep * thin`` sweeps and keep every ``thin``-th post-burn-in state."""
    config = config or ChainConfig()
    if isinstance(data, Cohort):
        data = CohortArrays.from_cohort(data, spec)
    rng = _rng(seed)
    if state is None:
        state = init_state(data, spec, priors, rng)
    sampler = GibbsSampler(data, spec, priors, rng, config)
    store = PosteriorDrawStore(spec)
    total = config.burn_in + config.keep * config.thin
    for it in range(1, total + 1):
        try:
            sampler.sweep(state)
        except (ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
            raise SamplerError(str(exc), it) from exc
        burn = it <= config.burn_in
        if burn and it % config.adapt_every == 0:
            sampler.tuning.adapt()
        if it == config.burn_in:
            sampler.tuning.reset_totals()
        if it % config.log_every == 0 or it == total:
            for name, acc, tried in sampler.tuning.drain_log():
                store.acceptance.append({
                    "chain": chain, "iteration": it, "block": name,
                    "phase": "burn_in" if burn else "keep",
                    "accepted": int(acc), "proposed": int(tried),
                    "rate": acc / tried if tried else float("nan"),
                })
        store.trace.append(_trace_row(state, data, chain, it, burn))
        if not burn and (it - config.burn_in) % config.thin == 0:
            store.append(state.copy(), it, chain)
    store.rates = sampler.tuning.rates()
    return store


def _trace_row(state, data, chain, it, burn) -> dict:
    surv = survival_loglik_matrix(state, data)
    ll = float(surv[np.arange(data.n), state.v_beta].sum()) if data.n else 0.0
    row = {
        "chain": chain, "iteration": it, "phase": "burn_in" if burn else "keep",
        "occupied_outer": int(np.unique(state.v_beta).size),
        "occupied_cells": int(np.unique(state.cells()).size),
        "survival_loglik": ll,
        "alpha_theta_mean": float(np.mean(state.alpha_theta)),
    }
    for p in PROCESSES:
        row[f"sigma2_b_{p}"] = state.sigma2_b[p]
    return row
