import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from conftest import make_spec
from edpmed.data_model import BINARY, CONTINUOUS, AgeGrid
from edpmed.predictive import (DegenerateHistoryError, History, cell_weights, cluster_weights,
                               conditional_confounder_density, conditional_mediator_density,
                               conditional_survival, draw_baseline)
from edpmed.state import PROCESSES
from edpmed.synthetic import GewekeConfig, draw_prior_state, make_true_state, sticks_from_weights

GRID = AgeGrid((50.0, 56.0))


def _state(spec, rng, n=0):
    return draw_prior_state(spec, GewekeConfig(spec=spec).priors, n, rng)


def direct_cell_logw(state, spec, hist, through):
    """Brute-force log of xi_r xi_{s|r} p(l0) prod_k p(z) p(l) p(m) per cell."""
    N, M, P = spec.N, spec.M, spec.P
    sb = state.sticks
    knots = np.asarray(spec.basis.knots)
    x0 = np.asarray(hist.baseline, dtype=float)
    be = hist.effects()
    out = np.zeros((N, M))
    for r in range(N):
        for s in range(M):
            lw = math.log(sb.outer[r] * sb.inner[r, s])
            for p in range(P):
                loc, var = state.l0_loc[r, s, p], state.l0_var[r, s, p]
                if spec.schema.kinds[p] == BINARY:
                    lw += math.log(loc if x0[p] == 1 else 1 - loc)
                else:
                    lw += stats.norm.logpdf(x0[p], loc, math.sqrt(var))
            for proc in PROCESSES:
                vals = getattr(hist, proc)
                for k in range(through[proc]):
                    a = hist.grid.ages[k]
                    brow = (np.abs(a - knots) ** 3) @ spec.basis.penalty_inv_sqrt
                    c = state.coef[proc][r, s]
                    eta = c[0] + x0 @ c[1:1 + P] + brow @ c[1 + P:] + be[proc]
                    if spec.kinds[proc] == BINARY:
                        lw += stats.norm.logcdf(eta if vals[k] == 1 else -eta)
                    else:
                        lw += stats.norm.logpdf(vals[k], eta, math.sqrt(state.sigma2[proc][r, s]))
            out[r, s] = lw
    return out


def _norm(lw):
    w = np.exp(lw - lw.max())
    return w / w.sum()


def _history(rng, grid=GRID, lag_m=False):
    K = grid.K
    return History(grid, z=tuple(rng.integers(0, 2, K)), l=tuple(rng.integers(0, 2, K)),
                   m=tuple(rng.normal(size=K - int(lag_m))),
                   baseline=(float(rng.normal()), float(rng.integers(0, 2))),
                   random_effects=tuple(rng.normal(scale=0.3, size=3)))


def test_single_cluster_weight(rng):
    spec = make_spec(1, 1)
    st_ = _state(spec, rng)
    np.testing.assert_array_equal(cluster_weights(st_, spec, _history(rng)), [1.0])


def test_weights_match_brute_force(rng):
    spec = make_spec(2, 2)
    for _ in range(5):
        st_ = _state(spec, rng)
        h = _history(rng)
        full = {"z": 2, "l": 2, "m": 2}
        np.testing.assert_allclose(cell_weights(st_, spec, h),
                                   _norm(direct_cell_logw(st_, spec, h, full)), atol=1e-12)
        lag = {"z": 2, "l": 2, "m": 1}
        np.testing.assert_allclose(cell_weights(st_, spec, h, lag),
                                   _norm(direct_cell_logw(st_, spec, h, lag)), atol=1e-12)


def _symmetric_pair(spec, rng):
    st_ = _state(spec, rng)
    st_.outer_sticks = np.array([0.5, 1.0])
    st_.inner_sticks[:] = st_.inner_sticks[0]
    for p in PROCESSES:
        st_.coef[p][1] = st_.coef[p][0]
    st_.sigma2["m"][1] = st_.sigma2["m"][0]
    st_.l0_loc[1], st_.l0_var[1] = st_.l0_loc[0], st_.l0_var[0]
    return st_


def test_identical_clusters_give_equal_weights(rng):
    spec = make_spec(2, 2)
    st_ = _symmetric_pair(spec, rng)
    np.testing.assert_allclose(cluster_weights(st_, spec, _history(rng)), [0.5, 0.5], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_weights_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    spec = make_spec(3, 2)
    w = cluster_weights(_state(spec, rng), spec, _history(rng))
    assert abs(w.sum() - 1.0) < 1e-12 and np.all(w >= 0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_degenerate_history(rng):
    spec = make_spec(2, 1)
    st_ = _state(spec, rng)
    st_.sigma2["m"][:] = 1e-300
    h = History(GRID, z=(1,), l=(0,), m=(1e200,), baseline=(0.0, 1.0))
    with pytest.raises(DegenerateHistoryError, match="degenerate history"):
        cluster_weights(st_, spec, h)


# --------------------------------------------------------------- survival

def test_single_cluster_survival_collapses(rng):
    spec = make_spec(1, 1, cutpoints=(0.0, 80.0))
    st_ = _state(spec, rng)
    lam, beta = st_.lambdas[0, 0], st_.betas[0]
    h = _history(rng)
    x0 = np.asarray(h.baseline)
    for age in (56.0, 60.0, 79.0):
        assert conditional_survival(st_, spec, h, age) == pytest.approx(
            math.exp(-lam * age * math.exp(beta @ x0)), rel=1e-12)
    empty = History(GRID, baseline=h.baseline)
    assert conditional_survival(st_, spec, empty, 0.0) == 1.0


def test_two_cluster_survival_hand(rng):
    spec = make_spec(2, 2)
    st_ = _state(spec, rng)
    h = _history(rng)
    w = _norm(direct_cell_logw(st_, spec, h, {"z": 2, "l": 2, "m": 2})).sum(axis=1)
    x0 = np.asarray(h.baseline)
    cut = spec.partition.cutpoints
    age = 63.0
    S = []
    for r in range(2):
        cum = sum(st_.lambdas[r, b] * max(0.0, min(age, cut[b + 1]) - cut[b]) for b in range(2))
        S.append(math.exp(-math.exp(st_.betas[r] @ x0) * cum))
    assert conditional_survival(st_, spec, h, age) == pytest.approx(w @ S, abs=1e-12)
    with pytest.raises(ValueError):
        conditional_survival(st_, spec, h, 55.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_survival_monotone_in_age(seed):
    rng = np.random.default_rng(seed)
    spec = make_spec(2, 2)
    st_, h = _state(spec, rng), _history(rng)
    mesh = np.linspace(56.0, 70.0, 100)
    s = np.array([conditional_survival(st_, spec, h, a) for a in mesh])
    assert np.all((s >= 0) & (s <= 1))
    assert np.all(np.diff(s) <= 0)


def test_survival_vector_ages_match_scalar(rng):
    spec = make_spec(2, 2)
    st_, h = _state(spec, rng), _history(rng)
    mesh = np.array([56.0, 58.5, 63.0, 70.0])
    vec = conditional_survival(st_, spec, h, mesh)
    assert vec.shape == mesh.shape
    np.testing.assert_allclose(vec, [conditional_survival(st_, spec, h, a) for a in mesh],
                               rtol=0, atol=1e-15)


def _permute(state, o, i):
    perm = state.copy()
    w = state.joint_weights()
    perm.outer_sticks = sticks_from_weights(w.sum(axis=1)[o])
    perm.inner_sticks = sticks_from_weights((w / w.sum(axis=1, keepdims=True))[o][:, i])
    perm.lambdas, perm.betas = state.lambdas[o], state.betas[o]
    for p in PROCESSES:
        perm.coef[p] = state.coef[p][o][:, i]
    for p in state.sigma2:
        perm.sigma2[p] = state.sigma2[p][o][:, i]
    perm.l0_loc, perm.l0_var = state.l0_loc[o][:, i], state.l0_var[o][:, i]
    return perm


def test_label_permutation_invariance(rng):
    spec = make_spec(3, 2)
    for _ in range(10):
        st_ = _state(spec, rng)
        h = _history(rng)
        hm = _history(rng, lag_m=True)
        perm = _permute(st_, [2, 0, 1], [1, 0])
        assert abs(conditional_survival(st_, spec, h, 64.0) -
                   conditional_survival(perm, spec, h, 64.0)) < 1e-12
        assert abs(conditional_mediator_density(st_, spec, hm, 56.0, 0.4) -
                   conditional_mediator_density(perm, spec, hm, 56.0, 0.4)) < 1e-12
        np.testing.assert_allclose(np.sort(cluster_weights(st_, spec, h)),
                                   np.sort(cluster_weights(perm, spec, h)), atol=1e-12)


# -------------------------------------------------------------- densities

def test_single_cluster_mediator_density(rng):
    spec = make_spec(1, 1)
    st_ = _state(spec, rng)
    h = History(GRID, z=(1,), l=(0,), m=(), baseline=(0.3, 1.0), random_effects=(0.2, 0.0, 0.0))
    c = st_.coef["m"][0, 0]
    eta = c[0] + np.array([0.3, 1.0]) @ c[1:3] + spec.basis.rows([50.0])[0] @ c[3:] + 0.2
    sd = math.sqrt(st_.sigma2["m"][0, 0])
    for v in (eta, eta + 0.5):
        assert conditional_mediator_density(st_, spec, h, 50.0, v) == pytest.approx(
            stats.norm.pdf(v, eta, sd), rel=1e-12)


def _binary_spec(N):
    return make_spec(N, 1, l_kind=BINARY, m_kind=BINARY, baseline=(("g", BINARY),))


def _binary_state(spec, coef, xi=None):
    N = spec.N
    return make_true_state(spec, xi or [1.0 / N] * N, [[1.0]] * N, [[0.01, 0.01]] * N,
                           [[0.0]] * N, coef, [[[0.5]]] * N)


def test_binary_mediator_index_zero():
    spec = _binary_spec(1)
    coef = {p: np.zeros(spec.q) for p in PROCESSES}
    st_ = _binary_state(spec, coef)
    h = History(GRID, z=(1,), l=(1,), m=(), baseline=(1.0,))
    assert conditional_mediator_density(st_, spec, h, 50.0, 1) == pytest.approx(0.5, abs=1e-15)
    assert conditional_mediator_density(st_, spec, h, 50.0, 0) == pytest.approx(0.5, abs=1e-15)


def test_confounder_probit_inversion():
    spec = _binary_spec(1)
    coef = {p: np.zeros(spec.q) for p in PROCESSES}
    coef["l"][0] = stats.norm.ppf(0.8)
    st_ = _binary_state(spec, coef)
    h = History(GRID, z=(0,), baseline=(0.0,))
    assert conditional_confounder_density(st_, spec, h, 50.0, 1) == pytest.approx(0.8, abs=1e-12)


def test_confounder_symmetric_mixture():
    spec = _binary_spec(2)
    zero = np.zeros(spec.q)
    coef = {"z": np.stack([zero, zero]), "m": np.stack([zero, zero]),
            "l": np.stack([zero, zero])}
    coef["l"][0, 0], coef["l"][1, 0] = 1.1, -1.1
    st_ = _binary_state(spec, coef)
    h = History(GRID, z=(1,), baseline=(1.0,))
    assert conditional_confounder_density(st_, spec, h, 50.0, 1) == pytest.approx(0.5, abs=1e-12)


def test_two_cluster_densities_match_direct_ratio(rng):
    spec = make_spec(2, 2)
    for _ in range(5):
        st_ = _state(spec, rng)
        h = _history(rng, lag_m=True)
        age = GRID.ages[1]
        lw = direct_cell_logw(st_, spec, h, {"z": 2, "l": 2, "m": 1})
        w = _norm(lw)
        c = st_.coef["m"]
        x0 = np.asarray(h.baseline)
        brow = spec.basis.rows([age])[0]
        eta = c[..., 0] + c[..., 1:3] @ x0 + c[..., 3:] @ brow + h.effects()["m"]
        v = 0.7
        dens = stats.norm.pdf(v, eta, np.sqrt(st_.sigma2["m"]))
        assert conditional_mediator_density(st_, spec, h, age, v) == pytest.approx(
            np.sum(w * dens), rel=1e-10)

        hl = History(GRID, z=h.z, l=h.l[:1], m=h.m[:1], baseline=h.baseline,
                     random_effects=h.random_effects)
        w = _norm(direct_cell_logw(st_, spec, hl, {"z": 2, "l": 1, "m": 1}))
        cl = st_.coef["l"]
        eta = cl[..., 0] + cl[..., 1:3] @ x0 + cl[..., 3:] @ brow + h.effects()["l"]
        for val in (0, 1):
            mass = stats.norm.cdf(eta if val else -eta)
            assert conditional_confounder_density(st_, spec, hl, age, val) == pytest.approx(
                np.sum(w * mass), rel=1e-10)


def test_continuous_mediator_density_integrates_to_one(rng):
    spec = make_spec(2, 2)
    st_ = _state(spec, rng)
    h = _history(rng, lag_m=True)
    f = lambda v: conditional_mediator_density(st_, spec, h, 56.0, v)
    total = integrate.quad(f, -60.0, 60.0, points=[0.0], limit=400, epsabs=1e-12)[0]
    assert abs(total - 1.0) < 1e-6


def test_binary_masses_sum_to_one(rng):
    spec = make_spec(2, 2)
    st_ = _state(spec, rng)
    h = History(GRID, z=(1, 0), l=(1,), m=(0.3,), baseline=(0.1, 0.0))
    tot = sum(conditional_confounder_density(st_, spec, h, 56.0, v) for v in (0, 1))
    assert tot == pytest.approx(1.0, abs=1e-14)


def test_density_age_must_be_next_grid_age(rng):
    spec = make_spec(2, 2)
    st_ = _state(spec, rng)
    h = _history(rng, lag_m=True)
    with pytest.raises(ValueError):
        conditional_mediator_density(st_, spec, h, 50.0, 0.1)


# --------------------------------------------------------------- baseline

def test_draw_baseline_symmetric_mixture(rng):
    spec = make_spec(2, 1, baseline=(("x", CONTINUOUS),))
    coef = {p: np.zeros((2, spec.q)) for p in PROCESSES}
    st_ = make_true_state(spec, [0.5, 0.5], [[1.0], [1.0]], [[0.01, 0.01]] * 2, [[0.0], [0.0]],
                          coef, [[[-1.0]], [[1.0]]], [[[0.25]], [[0.25]]],
                          sigma2={"m": [[1.0], [1.0]]})
    x = draw_baseline(st_, spec, rng, 10000)[:, 0]
    sd = math.sqrt(0.25 + 1.0)
    assert abs(x.mean()) < 3 * sd / 100
    assert abs(np.mean(x ** 2) - 1.25) < 3 * np.std(x ** 2) / 100


def test_draw_baseline_mixture_moments(rng):
    spec = make_spec(3, 2)
    st_ = _state(spec, rng)
    x = draw_baseline(st_, spec, rng, 20000)
    w = st_.joint_weights().ravel()
    loc = st_.l0_loc.reshape(-1, 2)
    var = st_.l0_var.reshape(-1, 2)
    mean = w @ loc
    var_x = w @ (var[:, 0] + loc[:, 0] ** 2) - mean[0] ** 2
    var_g = mean[1] * (1 - mean[1])
    se = np.sqrt([var_x, var_g] / np.array(20000.0))
    assert np.all(np.abs(x.mean(axis=0) - mean) < 3 * se)


def test_draw_baseline_point_mass(rng):
    spec = make_spec(1, 1, baseline=(("x", CONTINUOUS),))
    coef = {p: np.zeros((1, spec.q)) for p in PROCESSES}
    st_ = make_true_state(spec, [1.0], [[1.0]], [[0.01, 0.01]], [[0.0]], coef, [[[3.0]]],
                          [[[1e-12]]], sigma2={"m": [[1.0]]})
    x = draw_baseline(st_, spec, rng, 1000)
    assert np.max(np.abs(x - 3.0)) < 1e-4
    assert draw_baseline(st_, spec, rng).shape == (1,)
