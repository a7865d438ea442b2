"""Parameter containers shared by the sampler, the predictive code and G-computation.

Cluster-indexed arrays use 0-based labels: outer (beta-level) clusters
``r = 0..N-1`` and inner (theta-level) clusters ``s = 0..M-1``. A flattened
cell index is ``r * M + s``.

Each longitudinal process (``z``, ``l``, ``m``) has coefficients over the design
row ``[1, l0_1..l0_P, B_1(a)..B_D(a)]``; the first ``1 + P`` entries are the
regression part and the last ``D`` the spline part.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .data_model import BINARY, CONTINUOUS, CovariateSchema
from .spline import SplineBasis, make_basis
from .survival import HazardPartition

__all__ = [
    "PROCESSES",
    "SCHEMA_VERSION",
    "Truncation",
    "StickWeights",
    "stick_breaking",
    "ModelSpec",
    "PriorConfig",
    "PosteriorState",
]

PROCESSES = ("z", "l", "m")
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Truncation:
    N: int = 10
    M: int = 10

    def __post_init__(self):
        if int(self.N) < 1 or int(self.M) < 1:
            raise ValueError("truncation levels must be >= 1")

    @property
    def cells(self) -> int:
        return self.N * self.M


def stick_breaking(sticks) -> np.ndarray:
    """Weights ``xi_r = xi'_r prod_{t<r} (1 - xi'_t)`` along the last axis."""
    v = np.asarray(sticks, dtype=float)
    rest = np.cumprod(1.0 - v, axis=-1)
    lead = np.ones(v.shape[:-1] + (1,))
    return v * np.concatenate([lead, rest[..., :-1]], axis=-1)


@dataclass(frozen=True, eq=False)
class StickWeights:
    outer_sticks: np.ndarray
    inner_sticks: np.ndarray

    @property
    def outer(self) -> np.ndarray:
        return stick_breaking(self.outer_sticks)

    @property
    def inner(self) -> np.ndarray:
        return stick_breaking(self.inner_sticks)

    @property
    def joint(self) -> np.ndarray:
        return self.outer[:, None] * self.inner


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Everything fixed across iterations: data schema, spline, hazard partition, truncation."""

    schema: CovariateSchema
    basis: SplineBasis
    partition: HazardPartition
    truncation: Truncation = field(default_factory=Truncation)

    @property
    def P(self) -> int:
        return self.schema.n_baseline

    @property
    def D(self) -> int:
        return self.basis.D

    @property
    def q(self) -> int:
        return 1 + self.P + self.D

    @property
    def B(self) -> int:
        return self.partition.B

    @property
    def N(self) -> int:
        return self.truncation.N

    @property
    def M(self) -> int:
        return self.truncation.M

    @property
    def kinds(self) -> dict[str, str]:
        return {"z": BINARY, "l": self.schema.l_kind, "m": self.schema.m_kind}

    def continuous(self) -> list[str]:
        return [p for p in PROCESSES if self.kinds[p] == CONTINUOUS]

    def binary(self) -> list[str]:
        return [p for p in PROCESSES if self.kinds[p] == BINARY]

    def to_dict(self) -> dict:
        return {
            "schema": self.schema.to_dict(),
            "spline": self.basis.to_dict(),
            "hazard": self.partition.to_dict(),
            "truncation": {"N": self.N, "M": self.M},
        }

    @classmethod
    def from_dict(cls, d) -> "ModelSpec":
        return cls(
            CovariateSchema.from_dict(d["schema"]),
            make_basis(d["spline"]["knots"], d["spline"].get("eigen_floor", 1e-10)),
            HazardPartition(np.asarray(d["hazard"]["cutpoints"], dtype=float)),
            Truncation(int(d["truncation"]["N"]), int(d["truncation"]["M"])),
        )


def _arr(x):
    return np.asarray(x, dtype=float)


@dataclass(eq=False)
class PriorConfig:
    """Base-measure hyperparameters.

    Coefficient priors are ``N(mean, c * var0)`` where ``mean`` and ``var0``
    come from whole-data maximum-likelihood fits. The baseline-hazard prior is
    ``Gamma(len_b * lambda_star * w, len_b * w)`` for the first ``B - 1``
    intervals and ``Gamma(lambda_star * w_B, w_B)`` for the last.
    Inverse-gamma pairs are ``(shape, scale)``.
    """

    c: float
    lambda_star: float
    w: float
    w_B: float
    beta_mean: np.ndarray
    beta_var0: np.ndarray
    coef_mean: dict
    coef_var0: dict
    sigma2: dict
    re_sigma2: dict
    l0_mean: np.ndarray
    l0_mean_var: np.ndarray
    l0_a: np.ndarray
    l0_b: np.ndarray
    a_theta: float = 1.0
    b_theta: float = 1.0
    alpha_beta: float = 1.0
    a_beta: float = 1.0
    b_beta: float = 1.0

    def __post_init__(self):
        self.beta_mean = _arr(self.beta_mean)
        self.beta_var0 = _arr(self.beta_var0)
        self.coef_mean = {k: _arr(v) for k, v in self.coef_mean.items()}
        self.coef_var0 = {k: _arr(v) for k, v in self.coef_var0.items()}
        self.sigma2 = {k: tuple(map(float, v)) for k, v in self.sigma2.items()}
        self.re_sigma2 = {k: tuple(map(float, v)) for k, v in self.re_sigma2.items()}
        for name in ("l0_mean", "l0_mean_var", "l0_a", "l0_b"):
            setattr(self, name, _arr(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if not self.c > 1:
            raise ValueError(f"prior inflation c must exceed 1, got {self.c}")
        pos = [self.lambda_star, self.w, self.w_B, self.a_theta, self.b_theta,
               self.alpha_beta, self.a_beta, self.b_beta]
        if not all(np.isfinite(pos)) or min(pos) <= 0:
            raise ValueError("hazard, concentration and Gamma hyperparameters must be positive")
        if np.any(self.beta_var0 <= 0):
            raise ValueError("beta prior variances must be positive")
        for k, v in self.coef_var0.items():
            if np.any(v <= 0):
                raise ValueError(f"coefficient prior variances for {k!r} must be positive")
        for k, (a, b) in list(self.sigma2.items()) + list(self.re_sigma2.items()):
            if a <= 0 or b <= 0:
                raise ValueError(f"inverse-gamma hyperparameters for {k!r} must be positive")
        if np.any(self.l0_a <= 0) or np.any(self.l0_b <= 0):
            raise ValueError("baseline-covariate hyperparameters must be positive")

    def beta_prior_var(self) -> np.ndarray:
        return self.c * self.beta_var0

    def coef_prior_var(self, proc: str) -> np.ndarray:
        return self.c * self.coef_var0[proc]

    def lambda_prior(self, partition: HazardPartition) -> tuple[np.ndarray, np.ndarray]:
        """Gamma (shape, rate) per interval."""
        ln = partition.lengths.copy()
        shape = ln * self.lambda_star * self.w
        rate = ln * self.w
        shape[-1] = self.lambda_star * self.w_B
        rate[-1] = self.w_B
        return shape, rate

    def to_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            if isinstance(v, np.ndarray):
                out[k] = v.tolist()
            elif isinstance(v, dict):
                out[k] = {kk: (vv.tolist() if isinstance(vv, np.ndarray) else list(vv))
                          for kk, vv in v.items()}
            else:
                out[k] = v
        return out

    @classmethod
    def from_dict(cls, d) -> "PriorConfig":
        return cls(**d)

    def replace(self, **changes) -> "PriorConfig":
        d = self.to_dict()
        d.update(changes)
        return PriorConfig.from_dict(d)


@dataclass(eq=False)
class PosteriorState:
    v_beta: np.ndarray
    v_theta: np.ndarray
    outer_sticks: np.ndarray
    inner_sticks: np.ndarray
    lambdas: np.ndarray
    betas: np.ndarray
    coef: dict
    sigma2: dict
    l0_loc: np.ndarray
    l0_var: np.ndarray
    b: dict
    sigma2_b: dict
    alpha_beta: float
    alpha_theta: np.ndarray

    @property
    def N(self) -> int:
        return self.outer_sticks.size

    @property
    def M(self) -> int:
        return self.inner_sticks.shape[1]

    @property
    def n(self) -> int:
        return self.v_beta.size

    @property
    def sticks(self) -> StickWeights:
        return StickWeights(self.outer_sticks, self.inner_sticks)

    def joint_weights(self) -> np.ndarray:
        return self.sticks.joint

    def cells(self) -> np.ndarray:
        return self.v_beta * self.M + self.v_theta

    def copy(self) -> "PosteriorState":
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        def enc(v):
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, dict):
                return {k: enc(x) for k, x in v.items()}
            return v
        return {k: enc(v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d) -> "PosteriorState":
        f = lambda x: np.asarray(x, dtype=float)
        return cls(
            v_beta=np.asarray(d["v_beta"], dtype=np.int64),
            v_theta=np.asarray(d["v_theta"], dtype=np.int64),
            outer_sticks=f(d["outer_sticks"]),
            inner_sticks=f(d["inner_sticks"]).reshape(len(d["inner_sticks"]), -1),
            lambdas=f(d["lambdas"]).reshape(len(d["lambdas"]), -1),
            betas=f(d["betas"]).reshape(len(d["betas"]), -1),
            coef={k: f(v) for k, v in d["coef"].items()},
            sigma2={k: f(v) for k, v in d["sigma2"].items()},
            l0_loc=f(d["l0_loc"]),
            l0_var=f(d["l0_var"]),
            b={k: f(v) for k, v in d["b"].items()},
            sigma2_b={k: float(v) for k, v in d["sigma2_b"].items()},
            alpha_beta=float(d["alpha_beta"]),
            alpha_theta=f(d["alpha_theta"]),
        )

    def check(self, spec: ModelSpec) -> None:
        N, M, P, B, q = spec.N, spec.M, spec.P, spec.B, spec.q
        assert self.outer_sticks.shape == (N,) and self.inner_sticks.shape == (N, M)
        assert self.outer_sticks[-1] == 1.0 and np.all(self.inner_sticks[:, -1] == 1.0)
        assert self.lambdas.shape == (N, B) and self.betas.shape == (N, P)
        for p in PROCESSES:
            assert self.coef[p].shape == (N, M, q)
        for p in spec.continuous():
            assert self.sigma2[p].shape == (N, M) and np.all(self.sigma2[p] > 0)
        assert self.l0_loc.shape == (N, M, P) and self.l0_var.shape == (N, M, P)
        assert np.all(self.alpha_theta > 0) and self.alpha_theta.shape == (N,)
        assert all(v > 0 for v in self.sigma2_b.values())
        if self.n:
            assert 0 <= self.v_beta.min() and self.v_beta.max() < N
            assert 0 <= self.v_theta.min() and self.v_theta.max() < M
