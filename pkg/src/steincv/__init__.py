"""Stein control variates and variance-reduced evidence estimation.

The package couples derivative-based Monte Carlo variance reduction
(polynomial zero-variance control variates and kernel control functionals)
with an adaptive likelihood-annealing SMC sampler and two evidence
estimators built on its tempered populations.
"""

from .cf import KernelSpec, cf_cv_bandwidth, cf_estimate, stein_kernel_matrix
from .errors import (
    BasisTooLarge,
    ConditioningError,
    ConvergenceError,
    DegenerateWeights,
    DomainError,
    InsufficientSamples,
    InvalidInput,
    InvalidSchedule,
    SteinCvError,
)
from .evidence import (
    VANILLA,
    CfMethod,
    CrossvalMethod,
    EvidenceReport,
    ExpectationRecord,
    cti_estimate,
    cti_quadrature,
    expectation_with_provenance,
    smc_evidence_estimate,
    stabilised_cv_expectation,
)
from .models import (
    ConjugateGaussianModel,
    GaussianModel,
    LogisticModel,
    RecaptureModel,
    TargetModel,
    TransformedModel,
    load_model,
    model_from_manifest,
    synthetic_logistic_model,
)
from .polybasis import (
    ExponentMatrix,
    SubsetSpec,
    basis_size,
    build_design_matrix,
    enumerate_exponents,
    stein_covariates,
)
from .regression import (
    CvConfig,
    RegressionFit,
    cv_lambda,
    fit_lasso,
    fit_ols,
    fit_ridge,
    lasso_lambda_max,
    refit_fixed_intercept,
)
from .samples import (
    IntegrandValues,
    ParameterTransform,
    SampleSet,
    Standardisation,
    read_sample_csv,
    standardise,
    transform_samples,
    weighted_mean,
    weighted_sd,
    write_sample_csv,
)
from .smc import (
    ParticleSystem,
    ReplayRecord,
    SmcConfig,
    Snapshot,
    TemperatureSchedule,
    cess,
    choose_num_repeats,
    ess,
    load_particle_system,
    load_replay_record,
    next_temperature,
    posthoc_schedule,
    resample_multinomial,
    reweight,
    run_smc,
    save_particle_system,
    tune_step_size,
    weighted_covariance,
)
from .zvcv import CvSelectionResult, ZvSpec, apriori_estimate, crossval_select, zvcv_estimate

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
