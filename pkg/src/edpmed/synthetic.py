"""Known-truth models, cohort generation and brute-force reference computations.

``truth_by_quadrature`` evaluates the identification integral directly on
small instances: it enumerates every binary ``(l, m)`` path on the grid,
integrates the baseline covariates (exact sums for binary ones,
Gauss-Hermite for continuous ones) and the three random intercepts
(tensor Gauss-Hermite), and weights each path by its survival along the
grid. Its densities are written with :mod:`scipy.stats`, separately from the
package's predictive code.

``geweke_harness`` compares the marginal-conditional and successive-conditional
simulators of the joint distribution of parameters and data.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data_model import BINARY, CONTINUOUS, AgeGrid, Cohort, CovariateSchema, Landmark, \
    SubjectRecord
from .sampler import (ChainConfig, CohortArrays, GibbsSampler, MHTuning, _inv_gamma,
                      _prior_coef, _prior_l0, _prior_sticks, _prior_survival, _rng)
from .spline import make_basis
from .state import PROCESSES, ModelSpec, PosteriorState, PriorConfig, Truncation
from .survival import HazardPartition

__all__ = [
    "LandmarkLaw",
    "TrueModel",
    "sticks_from_weights",
    "make_true_state",
    "reference_model",
    "two_cluster_model",
    "REFERENCE_MODELS",
    "simulate_arrays",
    "generate_cohort",
    "truth_by_quadrature",
    "truth_effects",
    "draw_prior_state",
    "GewekeConfig",
    "GewekeResult",
    "geweke_statistics",
    "geweke_harness",
]


# ---------------------------------------------------------------------- models

@dataclass(frozen=True)
class LandmarkLaw:
    """First landmark age ~ U(first), gaps ~ U(spacing), ``count`` landmarks per subject."""

    first: tuple = (44.0, 46.0)
    spacing: tuple = (4.0, 6.0)
    count: int = 4

    def __post_init__(self):
        if not (0 <= self.first[0] <= self.first[1]) or not (0 < self.spacing[0] <= self.spacing[1]):
            raise ValueError("landmark law needs 0 <= first_lo <= first_hi and 0 < gap_lo <= gap_hi")
        if self.count < 0:
            raise ValueError("landmark count must be >= 0")

    def draw(self, rng, n) -> np.ndarray:
        first = rng.uniform(self.first[0], self.first[1], size=(n, 1))
        gaps = rng.uniform(self.spacing[0], self.spacing[1], size=(n, max(self.count - 1, 0)))
        return np.cumsum(np.hstack([first, gaps]), axis=1)[:, :self.count]

    def to_dict(self) -> dict:
        return {"first": list(self.first), "spacing": list(self.spacing), "count": self.count}

    @classmethod
    def from_dict(cls, d) -> "LandmarkLaw":
        return cls(tuple(d["first"]), tuple(d["spacing"]), int(d["count"]))


@dataclass(eq=False)
class TrueModel:
    """A fixed parameter set plus landmark and administrative-censoring laws.

    ``state`` holds no subjects; only its cluster-level parameters and
    random-effect variances are used.
    """

    spec: ModelSpec
    state: PosteriorState
    landmarks: LandmarkLaw = field(default_factory=LandmarkLaw)
    censor_age: float = 70.0
    grid: tuple = ()
    target_age: float | None = None

    def __post_init__(self):
        self.state.check(self.spec)
        if not self.censor_age <= self.spec.partition.upper:
            raise ValueError("censoring age exceeds the last hazard cutpoint")
        if not self.censor_age > self.landmarks.first[1]:
            raise ValueError("censoring age must exceed every first landmark age")

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "state": self.state.to_dict(),
            "landmarks": self.landmarks.to_dict(),
            "censor_age": self.censor_age,
            "grid": list(self.grid),
            "target_age": self.target_age,
        }

    @classmethod
    def from_dict(cls, d) -> "TrueModel":
        return cls(ModelSpec.from_dict(d["spec"]), PosteriorState.from_dict(d["state"]),
                   LandmarkLaw.from_dict(d["landmarks"]), float(d["censor_age"]),
                   tuple(d.get("grid", ())), d.get("target_age"))


def sticks_from_weights(w) -> np.ndarray:
    """Invert stick-breaking along the last axis; the last stick is 1."""
    w = np.asarray(w, dtype=float)
    w = w / w.sum(axis=-1, keepdims=True)
    used = np.concatenate([np.zeros(w.shape[:-1] + (1,)), np.cumsum(w, axis=-1)[..., :-1]], axis=-1)
    v = np.clip(w / np.maximum(1.0 - used, 1e-300), 0.0, 1.0)
    v[..., -1] = 1.0
    return v


def make_true_state(spec: ModelSpec, outer, inner, lambdas, betas, coef, l0_loc, l0_var=None,
                    sigma2=None, sigma2_b=None) -> PosteriorState:
    """Assemble a subject-free state from cluster weights and parameters."""
    N, M, P = spec.N, spec.M, spec.P
    coef = {p: np.asarray(coef[p], dtype=float).reshape(N, M, spec.q) for p in PROCESSES}
    sigma2 = {p: np.asarray(sigma2[p], dtype=float).reshape(N, M) for p in spec.continuous()}
    l0_var = np.ones((N, M, P)) if l0_var is None else np.asarray(l0_var, float).reshape(N, M, P)
    sb = {"z": 0.1, "l": 0.1, "m": 0.1} if sigma2_b is None else dict(sigma2_b)
    return PosteriorState(
        v_beta=np.zeros(0, dtype=np.int64), v_theta=np.zeros(0, dtype=np.int64),
        outer_sticks=sticks_from_weights(outer),
        inner_sticks=sticks_from_weights(np.asarray(inner, dtype=float).reshape(N, M)),
        lambdas=np.asarray(lambdas, dtype=float).reshape(N, spec.B),
        betas=np.asarray(betas, dtype=float).reshape(N, P),
        coef=coef, sigma2=sigma2,
        l0_loc=np.asarray(l0_loc, dtype=float).reshape(N, M, P), l0_var=l0_var,
        b={p: np.zeros(0) for p in PROCESSES},
        sigma2_b={p: float(sb[p]) for p in PROCESSES},
        alpha_beta=1.0, alpha_theta=np.ones(N),
    )


def _coef_row(spec, intercept, baseline=(), spline=()):
    row = np.zeros(spec.q)
    row[0] = intercept
    row[1:1 + len(baseline)] = baseline
    row[1 + spec.P:1 + spec.P + len(spline)] = spline
    return row


def reference_model() -> TrueModel:
    """One cluster, binary ``l`` and ``m``, one binary baseline covariate, a two-age grid."""
    schema = CovariateSchema((("g", BINARY),), BINARY, BINARY)
    spec = ModelSpec(schema, make_basis([45.0, 55.0, 65.0]),
                     HazardPartition([0.0, 45.0, 50.0, 55.0, 60.0, 70.0]), Truncation(1, 1))
    coef = {
        "z": _coef_row(spec, 0.2, (0.5,), (0.01, -0.01, 0.0)),
        "l": _coef_row(spec, -0.3, (0.4,), (0.0, 0.01, 0.0)),
        "m": _coef_row(spec, 0.1, (-0.6,), (0.01, 0.0, -0.01)),
    }
    state = make_true_state(spec, [1.0], [1.0], [[1e-4, 0.03, 0.04, 0.05, 0.06]], [[0.4]],
                            coef, [[[0.4]]], sigma2_b={"z": 0.3, "l": 0.2, "m": 0.25})
    return TrueModel(spec, state, LandmarkLaw((44.0, 46.0), (4.0, 6.0), 4), 70.0,
                     (50.0, 55.0), 58.0)


def two_cluster_model() -> TrueModel:
    """Two survival clusters that differ in exposure, confounder and mediator laws.

    Cluster 0 is mostly exposed with low confounder and mediator levels and a
    low hazard; cluster 1 is the reverse, so both the direct and the
    indirect effect are nonzero.
    """
    schema = CovariateSchema((("g", BINARY),), BINARY, BINARY)
    spec = ModelSpec(schema, make_basis([45.0, 55.0, 65.0]),
                     HazardPartition([0.0, 45.0, 50.0, 55.0, 60.0, 70.0]), Truncation(2, 1))
    coef = {
        "z": np.stack([_coef_row(spec, 0.8, (0.2,)), _coef_row(spec, -0.8, (0.2,))]),
        "l": np.stack([_coef_row(spec, -0.8), _coef_row(spec, 0.8)]),
        "m": np.stack([_coef_row(spec, -0.9, (0.0,), (0.005, 0.0, 0.0)),
                       _coef_row(spec, 0.9, (0.0,), (0.0, 0.0, 0.005))]),
    }
    lam = [[1e-4, 0.01, 0.01, 0.015, 0.015], [1e-4, 0.08, 0.08, 0.09, 0.09]]
    state = make_true_state(spec, [0.5, 0.5], [[1.0], [1.0]], lam, [[0.3], [0.3]], coef,
                            [[[0.5]], [[0.5]]], sigma2_b={"z": 0.1, "l": 0.1, "m": 0.1})
    return TrueModel(spec, state, LandmarkLaw((44.0, 46.0), (4.0, 6.0), 4), 70.0,
                     (50.0, 55.0, 60.0), 60.0)


REFERENCE_MODELS = {"reference": reference_model, "two_cluster": two_cluster_model}


# ------------------------------------------------------------------ generation

def _event_times(rng, lambdas, lp, cutpoints) -> np.ndarray:
    """Inverse-transform draws from per-subject piecewise-exponential laws (``inf`` past ``v_B``)."""
    n, B = lambdas.shape
    lengths = np.diff(cutpoints)
    cum = np.hstack([np.zeros((n, 1)), np.cumsum(lambdas * lengths, axis=1)])
    target = rng.standard_exponential(n) * np.exp(-lp)
    T = np.full(n, np.inf)
    for i in range(n):
        b = int(np.searchsorted(cum[i], target[i], side="right")) - 1
        if b < B:
            T[i] = cutpoints[b] + (target[i] - cum[i, b]) / lambdas[i, b]
    return T


def _draw_local(rng, kind, eta, var=None):
    if kind == BINARY:
        return (rng.random(eta.shape) < stats.norm.cdf(eta)).astype(float)
    return eta + np.sqrt(var) * rng.standard_normal(eta.shape)


def simulate_arrays(state: PosteriorState, spec: ModelSpec, cells, l0, b: dict, ages,
                    censor_age: float, rng) -> CohortArrays:
    """Outcomes for subjects with known cells, baseline covariates and random intercepts.

    ``ages`` is ``(n, J)`` candidate landmark ages (``nan`` for none); a
    landmark is kept when it does not exceed the subject's observed time.
    """
    n = cells.size
    N, M = spec.N, spec.M
    NM = N * M
    r = cells // M
    ages = np.asarray(ages, dtype=float).reshape(n, -1)
    J = ages.shape[1]
    T = _event_times(rng, state.lambdas[r], np.einsum("ip,ip->i", l0, state.betas[r]),
                     spec.partition.cutpoints)
    t = np.minimum(T, censor_age)
    delta = (T <= censor_age).astype(float)
    flat = ages.ravel()
    valid = np.isfinite(flat)
    rows = np.zeros((n * J, spec.D))
    if valid.any():
        rows[valid] = spec.basis.rows(flat[valid])
    subj = np.repeat(np.arange(n), J)
    X = np.hstack([np.ones((n * J, 1)), l0[subj], rows])
    vals = {}
    for p in PROCESSES:
        coef = state.coef[p].reshape(NM, spec.q)[cells[subj]]
        eta = np.einsum("oq,oq->o", X, coef) + b[p][subj]
        var = state.sigma2[p].reshape(NM)[cells[subj]] if p in spec.continuous() else None
        vals[p] = _draw_local(rng, spec.kinds[p], eta, var)
    keep = valid & (flat <= t[subj])
    return CohortArrays.build(spec, l0, t, delta, subj[keep], flat[keep],
                              {p: v[keep] for p, v in vals.items()})


def _draw_l0(rng, state, spec, cells) -> np.ndarray:
    NM = spec.N * spec.M
    loc = state.l0_loc.reshape(NM, spec.P)[cells]
    var = state.l0_var.reshape(NM, spec.P)[cells]
    mask = spec.schema.binary_mask()
    u = rng.random(loc.shape)
    zn = rng.standard_normal(loc.shape)
    return np.where(mask, (u < loc).astype(float), loc + np.sqrt(var) * zn)


def _draw_cells(rng, state, n) -> np.ndarray:
    w = state.joint_weights().ravel()
    return rng.choice(w.size, size=n, p=w / w.sum())


def generate_cohort(model: TrueModel, n: int, seed=0) -> Cohort:
    """Draw ``n`` subjects from ``model``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = _rng(seed)
    st, spec = model.state, model.spec
    cells = _draw_cells(rng, st, n)
    l0 = _draw_l0(rng, st, spec, cells)
    b = {p: math.sqrt(st.sigma2_b[p]) * rng.standard_normal(n) for p in PROCESSES}
    ages = model.landmarks.draw(rng, n)
    data = simulate_arrays(st, spec, cells, l0, b, ages, model.censor_age, rng)
    return arrays_to_cohort(data, spec)


def arrays_to_cohort(data: CohortArrays, spec: ModelSpec) -> Cohort:
    width = max(4, len(str(data.n - 1)))
    cast = {BINARY: int, CONTINUOUS: float}
    subjects = []
    for i in range(data.n):
        idx = np.flatnonzero(data.obs_subject == i)
        lms = tuple(Landmark(float(data.obs_age[j]), int(data.y["z"][j]),
                             cast[spec.kinds["l"]](data.y["l"][j]),
                             cast[spec.kinds["m"]](data.y["m"][j])) for j in idx)
        base = tuple(cast[k](x) for k, x in zip(spec.schema.kinds, data.baseline[i]))
        subjects.append(SubjectRecord(f"s{i:0{width}d}", base, lms, float(data.t[i]),
                                      int(data.delta[i])))
    return Cohort(tuple(subjects), spec.schema)


# ------------------------------------------------------------------ quadrature

def _spline_rows(spec, ages):
    a = np.asarray(ages, dtype=float)
    raw = np.abs(a[:, None] - np.asarray(spec.basis.knots)[None, :]) ** 3
    return raw @ spec.basis.penalty_inv_sqrt


def _probit_logmass(y, eta):
    return stats.norm.logcdf(eta) if y else stats.norm.logcdf(-eta)


def truth_by_quadrature(model: TrueModel, grid, target_age: float, z1, z2,
                        gh_nodes: int = 32, re_nodes: int = 16) -> float:
    """Survival to ``target_age`` with the confounder under ``z1`` and the mediator under ``z2``.

    Parameters
    ----------
    model
        A true model with binary ``l`` and ``m`` and at most two continuous
        baseline covariates.
    grid
        Grid ages (at most three).
    z1, z2
        Exposure values at the grid ages.
    gh_nodes, re_nodes
        Gauss-Hermite orders for continuous baseline covariates and for each
        random intercept.
    """
    spec, st = model.spec, model.state
    ages = np.asarray(getattr(grid, "ages", grid), dtype=float)
    K = ages.size
    z1 = [int(v) for v in z1]
    z2 = [int(v) for v in z2]
    if spec.kinds["l"] != BINARY or spec.kinds["m"] != BINARY:
        raise ValueError("outside the tractable family: l and m must be binary")
    if not 1 <= K <= 3 or len(z1) != K or len(z2) != K:
        raise ValueError("outside the tractable family: need 1 <= K <= 3 regime values")
    mask = spec.schema.binary_mask()
    if np.sum(~mask) > 2:
        raise ValueError("outside the tractable family: more than two continuous baseline covariates")
    N, M, P = spec.N, spec.M, spec.P
    NM = N * M
    xi = st.joint_weights().ravel()
    loc = st.l0_loc.reshape(NM, P)
    var = st.l0_var.reshape(NM, P)
    coef = {p: st.coef[p].reshape(NM, spec.q) for p in PROCESSES}
    R = _spline_rows(spec, ages)

    # random intercepts (b_z, b_l, b_m)
    x, w = np.polynomial.hermite.hermgauss(re_nodes)
    w = w / math.sqrt(math.pi)
    bz, bl, bm = (g.ravel() for g in np.meshgrid(x, x, x, indexing="ij"))
    wre = np.einsum("i,j,k->ijk", w, w, w).ravel()
    sd = {p: math.sqrt(2.0 * st.sigma2_b[p]) for p in PROCESSES}
    b = {"z": sd["z"] * bz, "l": sd["l"] * bl, "m": sd["m"] * bm}

    xg, wg = np.polynomial.hermite.hermgauss(gh_nodes)
    wg = wg / math.sqrt(math.pi)

    def surv(l0, age):
        # (G, N) survival of each outer cluster at a single age
        v = spec.partition.cutpoints
        expo = np.clip(age - v[:-1], 0.0, np.diff(v))
        lam0 = st.lambdas @ expo
        return -np.expm1(-np.exp(l0 @ st.betas.T) * lam0[None, :])

    num = den = 0.0
    for c in range(NM):
        if xi[c] <= 0:
            continue
        axes, wts = [], []
        for p in range(P):
            if mask[p]:
                axes.append(np.array([0.0, 1.0]))
                wts.append(np.array([1.0 - loc[c, p], loc[c, p]]))
            else:
                axes.append(loc[c, p] + math.sqrt(2.0 * var[c, p]) * xg)
                wts.append(wg)
        if P:
            L0 = np.array(list(itertools.product(*axes)), dtype=float)
            WL = np.prod(np.array(list(itertools.product(*wts))), axis=1)
        else:
            L0, WL = np.zeros((1, 0)), np.ones(1)
        G = L0.shape[0]
        # baseline log-density under every cell, (G, NM)
        logp0 = np.log(np.maximum(xi, 1e-300))[None, :] + np.zeros((G, NM))
        for p in range(P):
            if mask[p]:
                logp0 += np.where(L0[:, p:p + 1] > 0.5, np.log(loc[:, p])[None, :],
                                  np.log1p(-loc[:, p])[None, :])
            else:
                logp0 += stats.norm.logpdf(L0[:, p:p + 1], loc[None, :, p],
                                           np.sqrt(var[None, :, p]))
        logp0 = np.where(xi[None, :] > 0, logp0, -np.inf)
        fail = [surv(L0, a) for a in list(ages) + [target_age]]
        # linear predictors (G, Rn, NM, K) per process
        eta = {}
        for p in PROCESSES:
            base = coef[p][:, 0][None, :] + L0 @ coef[p][:, 1:1 + P].T          # (G, NM)
            spl = R @ coef[p][:, 1 + P:].T                                      # (K, NM)
            eta[p] = base[:, None, :, None] + b[p][None, :, None, None] + spl.T[None, None]
        logp0 = logp0[:, None, :]

        def outer_w(logw):
            m = logw.max(axis=-1, keepdims=True)
            e = np.exp(logw - m)
            e = e / e.sum(axis=-1, keepdims=True)
            return e.reshape(e.shape[:-1] + (N, M)).sum(axis=-1)

        def p_surv(logw, f):
            return np.clip(1.0 - np.sum(outer_w(logw) * f[:, None, :], axis=-1), 0.0, 1.0)

        def mass(logw, logd):
            m = logw.max(axis=-1, keepdims=True)
            e = np.exp(logw - m)
            return np.sum(e * np.exp(logd), axis=-1) / e.sum(axis=-1)

        for path in itertools.product((0, 1), repeat=2 * K):
            Lz1 = np.zeros_like(eta["z"][..., 0])
            Lz2 = np.zeros_like(Lz1)
            Ll = np.zeros_like(Lz1)
            Lm = np.zeros_like(Lz1)
            weight = np.ones(eta["z"].shape[:2])
            for k in range(K):
                weight = weight * p_surv(logp0 + Lz1 + Ll + Lm, fail[k])
                Lz1 = Lz1 + _probit_logmass(z1[k], eta["z"][..., k])
                Lz2 = Lz2 + _probit_logmass(z2[k], eta["z"][..., k])
                dl = _probit_logmass(path[2 * k], eta["l"][..., k])
                weight = weight * mass(logp0 + Lz1 + Ll + Lm, dl)
                Ll = Ll + dl
                dm = _probit_logmass(path[2 * k + 1], eta["m"][..., k])
                weight = weight * mass(logp0 + Lz2 + Ll + Lm, dm)
                Lm = Lm + dm
            pa = p_surv(logp0 + Lz1 + Ll + Lm, fail[K])
            unit = xi[c] * WL[:, None] * wre[None, :]
            num += float(np.sum(unit * weight * pa))
            den += float(np.sum(unit * weight))
    return num / den


def truth_effects(model: TrueModel, grid=None, target_age=None, z=None, z_star=None,
                  **quad) -> dict:
    """Quadrature truths of the three regime-pair survivals and the effects."""
    grid = tuple(model.grid if grid is None else getattr(grid, "ages", grid))
    target_age = model.target_age if target_age is None else target_age
    K = len(grid)
    z = (1,) * K if z is None else tuple(z)
    z_star = (0,) * K if z_star is None else tuple(z_star)
    s = {
        "z,z": truth_by_quadrature(model, grid, target_age, z, z, **quad),
        "z,z*": truth_by_quadrature(model, grid, target_age, z, z_star, **quad),
        "z*,z*": truth_by_quadrature(model, grid, target_age, z_star, z_star, **quad),
    }
    ide = s["z,z*"] - s["z*,z*"]
    iie = s["z,z"] - s["z,z*"]
    return {"age": float(target_age), "grid": list(grid), "survival": s,
            "IDE": ide, "IIE": iie, "TE": ide + iie}


# --------------------------------------------------------------------- Geweke

def draw_prior_state(spec: ModelSpec, priors: PriorConfig, n: int, rng) -> PosteriorState:
    """One draw of every parameter and membership from the prior."""
    N, M = spec.N, spec.M
    alpha_theta = rng.gamma(priors.a_theta, 1.0 / priors.b_theta, size=N)
    outer = _prior_sticks(rng, priors.alpha_beta, (N,))
    inner = _prior_sticks(rng, alpha_theta[:, None], (N, M))
    lam, beta = _prior_survival(rng, spec, priors, N)
    coef = {p: _prior_coef(rng, priors, p, N * M).reshape(N, M, spec.q) for p in PROCESSES}
    sigma2 = {p: _inv_gamma(rng, np.full(N * M, priors.sigma2[p][0]),
                            priors.sigma2[p][1]).reshape(N, M) for p in spec.continuous()}
    loc, var = _prior_l0(rng, spec, priors, N * M)
    sigma2_b = {p: float(_inv_gamma(rng, priors.re_sigma2[p][0], priors.re_sigma2[p][1]))
                for p in PROCESSES}
    b = {p: math.sqrt(sigma2_b[p]) * rng.standard_normal(n) for p in PROCESSES}
    st = PosteriorState(
        v_beta=np.zeros(n, dtype=np.int64), v_theta=np.zeros(n, dtype=np.int64),
        outer_sticks=outer, inner_sticks=inner, lambdas=lam, betas=beta, coef=coef,
        sigma2=sigma2, l0_loc=loc.reshape(N, M, spec.P), l0_var=var.reshape(N, M, spec.P),
        b=b, sigma2_b=sigma2_b, alpha_beta=float(priors.alpha_beta), alpha_theta=alpha_theta)
    w = st.joint_weights().ravel()
    cells = _rng_cells(rng, w, n)
    st.v_beta, st.v_theta = np.divmod(cells, M)
    return st


def _rng_cells(rng, w, n):
    cum = np.cumsum(w)
    u = rng.random(n) * cum[-1]
    return np.minimum(np.searchsorted(cum, u, side="right"), w.size - 1)


def _regenerate(state, spec, cfg, rng) -> CohortArrays:
    cells = state.cells()
    l0 = _draw_l0(rng, state, spec, cells)
    n = cells.size
    ages = np.broadcast_to(np.asarray(cfg.candidate_ages, dtype=float), (n, len(cfg.candidate_ages)))
    return simulate_arrays(state, spec, cells, l0, state.b, ages, cfg.censor_age, rng)


GEWEKE_STATISTICS = (
    "beta_1", "beta_1_sq", "log_lambda_1", "log_lambda_1_sq", "log_lambda_B",
    "theta_m_intercept", "theta_m_intercept_sq", "eta_m_last", "sigma2_m",
    "theta_z_intercept", "theta_z_intercept_sq", "theta_l_intercept", "theta_l_baseline",
    "xi_1", "xi_1_given_1", "alpha_theta_1", "log_sigma2_b_m", "log_sigma2_b_z",
    "log_sigma2_b_l", "l0_mean_1",
)


def geweke_statistics(state: PosteriorState) -> np.ndarray:
    """The 20 scalar test functions, in the order of ``GEWEKE_STATISTICS``."""
    lam = state.lambdas[0]
    w = state.sticks
    cm, cz, cl = state.coef["m"][0, 0], state.coef["z"][0, 0], state.coef["l"][0, 0]
    return np.array([
        state.betas[0, 0], state.betas[0, 0] ** 2, math.log(lam[0]), math.log(lam[0]) ** 2,
        math.log(lam[-1]), cm[0], cm[0] ** 2, cm[-1], state.sigma2["m"][0, 0],
        cz[0], cz[0] ** 2, cl[0], cl[1], w.outer[0], w.inner[0, 0], state.alpha_theta[0],
        math.log(state.sigma2_b["m"]), math.log(state.sigma2_b["z"]),
        math.log(state.sigma2_b["l"]), state.l0_loc[0, 0, 0],
    ])


@dataclass(eq=False)
class GewekeConfig:
    """A tiny configuration for the joint-distribution test.

    The default has five subjects, two outer and two inner clusters, a binary
    confounder, a continuous mediator and one continuous plus one binary
    baseline covariate.
    """

    n_subjects: int = 5
    candidate_ages: tuple = (45.0, 50.0, 55.0)
    censor_age: float = 60.0
    spec: ModelSpec | None = None
    priors: PriorConfig | None = None

    def __post_init__(self):
        if self.n_subjects > 5:
            raise ValueError("the Geweke configuration is limited to at most five subjects")
        if self.spec is None:
            schema = CovariateSchema((("x", CONTINUOUS), ("g", BINARY)), BINARY, CONTINUOUS)
            self.spec = ModelSpec(schema, make_basis([45.0, 55.0]),
                                  HazardPartition([0.0, 52.0, 60.0]), Truncation(2, 2))
        if self.priors is None:
            q = self.spec.q
            var0 = np.array([0.5, 0.25, 0.25] + [1e-3] * (q - 3))
            self.priors = PriorConfig(
                c=2.0, lambda_star=0.02, w=2.0, w_B=50.0,
                beta_mean=np.zeros(self.spec.P), beta_var0=np.full(self.spec.P, 0.125),
                coef_mean={p: np.zeros(q) for p in PROCESSES},
                coef_var0={p: var0 for p in PROCESSES},
                sigma2={"m": (6.0, 5.0)},
                re_sigma2={"m": (6.0, 1.0), "l": (6.0, 1.0), "z": (6.0, 1.0)},
                l0_mean=[0.0, np.nan], l0_mean_var=[1.0, np.nan],
                l0_a=[6.0, 2.0], l0_b=[5.0, 2.0],
                a_theta=2.0, b_theta=2.0,
            )


@dataclass(eq=False)
class GewekeResult:
    names: tuple
    marginal_mean: np.ndarray
    successive_mean: np.ndarray
    z: np.ndarray
    iterations: int

    @property
    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.z)))

    def rows(self) -> list[tuple]:
        return list(zip(self.names, self.marginal_mean, self.successive_mean, self.z))


def _batch_se(x, batches):
    n = x.shape[0] // batches * batches
    bm = x[:n].reshape(batches, -1, x.shape[1]).mean(axis=1)
    return bm.std(axis=0, ddof=1) / math.sqrt(batches)


def geweke_harness(config: GewekeConfig | None = None, iterations: int = 50_000,
                   survival_lik_power: float = 1.0, seed=0, batches: int = 50) -> GewekeResult:
    """z-scores comparing the marginal-conditional and successive-conditional simulators.

    The successive-conditional chain alternates one full sweep of the sampler
    (no adaptation) with a fresh draw of the data given the parameters.
    ``survival_lik_power`` is passed to the sampler so that a deliberately
    wrong variant can be checked to fail.
    """
    cfg = config or GewekeConfig()
    spec, priors = cfg.spec, cfg.priors
    rng_mc = _rng([seed, 0])
    rng_sc = _rng([seed, 1])
    mc = np.empty((iterations, len(GEWEKE_STATISTICS)))
    for i in range(iterations):
        mc[i] = geweke_statistics(draw_prior_state(spec, priors, cfg.n_subjects, rng_mc))

    state = draw_prior_state(spec, priors, cfg.n_subjects, rng_sc)
    data = _regenerate(state, spec, cfg, rng_sc)
    sampler = GibbsSampler(data, spec, priors, rng_sc, ChainConfig(adapt=False),
                           survival_lik_power)
    sampler.tuning = MHTuning(adapt=False)
    sc = np.empty_like(mc)
    for i in range(iterations):
        sampler.data = data
        sampler.sweep(state)
        sc[i] = geweke_statistics(state)
        data = _regenerate(state, spec, cfg, rng_sc)
    se_mc = mc.std(axis=0, ddof=1) / math.sqrt(iterations)
    se_sc = _batch_se(sc, batches)
    z = (mc.mean(axis=0) - sc.mean(axis=0)) / np.sqrt(se_mc ** 2 + se_sc ** 2)
    return GewekeResult(GEWEKE_STATISTICS, mc.mean(axis=0), sc.mean(axis=0), z, iterations)
