import numpy as np
import pytest

from edpmed.data_model import BINARY, CONTINUOUS, CovariateSchema
from edpmed.sampler import CohortArrays
from edpmed.spline import make_basis
from edpmed.state import PROCESSES, ModelSpec, Truncation
from edpmed.survival import HazardPartition
from edpmed.synthetic import GewekeConfig


def make_spec(N=2, M=2, l_kind=BINARY, m_kind=CONTINUOUS, baseline=None,
              knots=(45.0, 55.0), cutpoints=(0.0, 52.0, 70.0)) -> ModelSpec:
    if baseline is None:
        baseline = (("x", CONTINUOUS), ("g", BINARY))
    schema = CovariateSchema(tuple(baseline), l_kind, m_kind)
    return ModelSpec(schema, make_basis(list(knots)), HazardPartition(list(cutpoints)),
                     Truncation(N, M))


def random_arrays(spec, n, rng, n_landmarks=3, censor=65.0) -> CohortArrays:
    """Arbitrary (not model-generated) data consistent with ``spec``."""
    P = spec.P
    mask = spec.schema.binary_mask()
    base = np.where(mask, rng.integers(0, 2, size=(n, P)), rng.normal(size=(n, P)))
    t = rng.uniform(50.0, censor, size=n)
    delta = (rng.random(n) < 0.6).astype(float)
    subj, ages = [], []
    for i in range(n):
        a = np.sort(rng.uniform(40.0, t[i], size=n_landmarks))
        subj += [i] * n_landmarks
        ages += list(a)
    n_obs = len(subj)
    vals = {}
    for p in PROCESSES:
        if spec.kinds[p] == BINARY:
            vals[p] = rng.integers(0, 2, size=n_obs).astype(float)
        else:
            vals[p] = rng.normal(size=n_obs)
    return CohortArrays.build(spec, base, t, delta, subj, ages, vals)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def spec22():
    return make_spec(2, 2)


@pytest.fixture
def priors22(spec22):
    return GewekeConfig(spec=spec22).priors


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
