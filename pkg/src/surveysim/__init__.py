"""Survey inference on synthetic multi-tier organizational frames.

Compares naive, design-weighted, and multiple-imputation estimators of
finite-population means on populations with a corporate-parent /
owner-subsidiary / practice hierarchy, including claims-derived auxiliary
covariates that sharpen the imputation model.
"""

from .claims import (
    CLAIMS_COLUMNS,
    TABLE5_COVARIATES,
    aggregate,
    attribute,
    generate_beneficiaries,
)
from .errors import (
    CalibrationError,
    ConfigError,
    DegenerateDesignError,
    DesignError,
    InsufficientDataError,
    NumericalError,
    PoolingError,
    SurveySimError,
    VarianceUndefinedError,
)
from .estimators import (
    EfficiencyDiagnostic,
    EstimateReport,
    correlation_summary,
    efficiency_diagnostic,
    ht_mean_and_variance,
    mi_mean,
    naive_mean,
    pool_rubin,
    weighted_mean,
)
from .frame import (
    FRAME_COVARIATES,
    Frame,
    GeneratorConfig,
    generate_frame,
    level_covariate,
    population_mean,
)
from .imputation import (
    ImputationModelSpec,
    ImputationSet,
    gibbs_impute,
    scenario,
    two_step_impute,
)
from .missingness import (
    ResponseModel,
    StudyDataset,
    apply_missingness,
    calibrate_response_model,
)
from .pipeline import (
    ExperimentConfig,
    PipelineResult,
    config_from_dict,
    default_config,
    replicate_study,
    run_pipeline,
)
from .sampling import (
    DesignSpec,
    SampleDraw,
    StageSpec,
    compute_stage_probabilities,
    draw_sample,
    poisson_sample,
)
from .util import anova_icc, stable_seed

__version__ = "0.1.0"

__all__ = [
    "CLAIMS_COLUMNS",
    "FRAME_COVARIATES",
    "TABLE5_COVARIATES",
    "CalibrationError",
    "ConfigError",
    "DegenerateDesignError",
    "DesignError",
    "DesignSpec",
    "EfficiencyDiagnostic",
    "EstimateReport",
    "ExperimentConfig",
    "Frame",
    "GeneratorConfig",
    "ImputationModelSpec",
    "ImputationSet",
    "InsufficientDataError",
    "NumericalError",
    "PipelineResult",
    "PoolingError",
    "ResponseModel",
    "SampleDraw",
    "StageSpec",
    "StudyDataset",
    "SurveySimError",
    "VarianceUndefinedError",
    "aggregate",
    "anova_icc",
    "apply_missingness",
    "attribute",
    "calibrate_response_model",
    "compute_stage_probabilities",
    "config_from_dict",
    "correlation_summary",
    "default_config",
    "draw_sample",
    "efficiency_diagnostic",
    "generate_beneficiaries",
    "generate_frame",
    "gibbs_impute",
    "ht_mean_and_variance",
    "level_covariate",
    "mi_mean",
    "naive_mean",
    "poisson_sample",
    "pool_rubin",
    "population_mean",
    "replicate_study",
    "run_pipeline",
    "scenario",
    "stable_seed",
    "two_step_impute",
    "weighted_mean",
]
