"""mipool: penalized variable selection pooled across multiply-imputed datasets."""

__version__ = "0.1.0"

from .data import (
    DataError,
    MultipleImputationSet,
    ObservationWeights,
    StandardizedView,
    back_transform,
    load_csv,
    observation_weights,
    standardize,
)
from .grouped import (
    GroupedControls,
    GroupedFit,
    fit_grouped,
    group_update,
    kkt_residual_grouped,
    lambda_max_grouped,
    pool_grouped_coefficients,
)
from .penalty import (
    MethodSpec,
    PenaltySpec,
    adaptive_weights_grouped,
    adaptive_weights_stacked,
    gamma_rule,
    parse_method,
    penalty_value,
)
from .simulate import (
    ReplicationMetrics,
    SimulationCaseConfig,
    case_config,
    generate_covariates,
    generate_outcome,
    impose_mar,
    impute_pmm,
    run_study,
    score_replication,
)
from .stacked import (
    SolverControls,
    StackedFit,
    fit_stacked,
    kkt_residual_stacked,
    lambda_max_stacked,
    soft_threshold,
    stack_rows,
)
from .tuning import (
    CvResult,
    PipelineResult,
    TuningGrid,
    assign_folds,
    cross_validate_grouped,
    cross_validate_stacked,
    fit_adaptive_pipeline,
    select_one_se,
)

__all__ = [name for name in dir() if not name.startswith("_")]
