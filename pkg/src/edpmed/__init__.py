"""Enriched Dirichlet process mixture joint model and G-computation of
interventional mediation effects on survival."""
from .data_model import (AgeGrid, Cohort, CovariateSchema, DataError, Landmark,
                         SubjectRecord, build_age_grid, load_cohort, write_cohort)
from .spline import SplineBasis, default_knots, make_basis
from .survival import HazardPartition, SurvivalParams, default_partition
from .state import ModelSpec, PosteriorState, PriorConfig, Truncation
from .sampler import (ChainConfig, CohortArrays, PosteriorDrawStore, default_priors,
                      init_state, run_chain)

__version__ = "0.1.0"
