"""Causal comparison of CD4-threshold treatment-initiation regimes.

Library layout:

* :mod:`dtrcompare.data_model` -- cohort representation, ingestion, outcomes
* :mod:`dtrcompare.splines` -- natural cubic spline bases
* :mod:`dtrcompare.survival` -- Nelson-Aalen / Cox / Breslow kernels
* :mod:`dtrcompare.regimes` -- regime rules and compliance processes
* :mod:`dtrcompare.weights` -- continuous-time stabilized weights
* :mod:`dtrcompare.imputation` -- joint CD4/mortality model, multiple imputation
* :mod:`dtrcompare.estimators` -- per-regime targets, continuum model, bootstrap
* :mod:`dtrcompare.simulator` -- synthetic cohorts with known ground truth
* :mod:`dtrcompare.cli` -- end-to-end pipeline orchestration
"""

from .data_model import (
    BaselineCovariates,
    CohortDataset,
    ObservedOutcome,
    OutcomeStatus,
    SubjectHistory,
    Visit,
    extract_outcome,
    ingest_cohort,
    write_cohort,
)
from .exceptions import (
    ConfigError,
    ConvergenceError,
    DataError,
    DtrError,
    ModelError,
    PositivityError,
    RankDeficiencyError,
    SeparationError,
)
from .imputation import Cd4ModelSpec, DeathModelSpec, ImputedCohort, fit_cd4_model, fit_death_model, impute, rubin_combine
from .regimes import RegimeSpec, compliance_process, compliance_survivor, default_regime_grid, regime_rule
from .simulator import GroundTruth, SimConfig, simulate_cohort, simulate_truth
from .splines import SplineBasis, build_basis, quantile_knots
from .survival import CumulativeHazard, ProportionalHazardsFit, RiskInterval, breslow_baseline, cox_fit, nelson_aalen
from .weights import StabilizedWeightSet, WeightModelSpec, denominator, discrete_time_weight, fit_initiation_model, stabilized_weights
from .estimators import (
    MsmFit,
    RegimeEstimate,
    bootstrap_pipeline,
    contrast,
    estimate_mortality,
    estimate_quantile,
    estimate_survivor_mean,
    msm_curve,
    msm_fit,
)

__version__ = "0.1.0"
