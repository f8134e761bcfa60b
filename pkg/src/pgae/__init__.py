"""Prediction-guided active experimentation: designs, policies, estimators."""

from .design import (
    DesignRule,
    VarianceComponents,
    budget_usage,
    capped_design,
    optimal_bound_closed_form,
    optimal_design,
    pi_for_fixed_p,
    variance_bound,
)
from .errors import (
    ConfigError,
    DataError,
    DesignError,
    FoldStarvationError,
    InsufficientLabeledDataError,
    PgaeError,
    PredictorNotFittedError,
    StarvationError,
)
from .estimator import (
    EstimateReport,
    ExperimentRecord,
    Trace,
    adaptive_estimate,
    baseline_estimates,
    confidence_interval,
    crossfit_estimate,
    influence_value,
    onestep_estimate,
    read_trace,
    write_trace,
)
from .harness import (
    MetricsTable,
    PolicySpec,
    oracle_design_numeric,
    oracle_world_components,
    population_components,
    replicate,
    run_policy,
    simulate_fixed_design,
)
from .nuisance import (
    NuisanceConfig,
    NuisanceFit,
    estimate_components,
    fit_mu,
    fit_nuisances,
    fit_tau,
    trivial_fit,
    update_design,
)
from .population import (
    CovariateSpace,
    FinitePopulation,
    PopulationSchema,
    Predictor,
    SyntheticDgp,
    bootstrap_draw,
    dgp_predict,
    dgp_sample,
    load_population,
    make_grid_space,
    save_population,
)
from .rng import stream

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
