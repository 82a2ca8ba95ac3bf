"""Constrained maximum-likelihood estimation of a multivariate normal
mean and covariance under ``Sigma mu = mu`` and ``|Sigma| = 1``."""

from .diagnostics import (
    CoverageEstimate,
    CurvatureQuery,
    counterexample_direction,
    directional_curvature,
    in_delta_region,
    wishart_coverage,
)
from .enforce import (
    MODIFIERS,
    ModifiedEstimate,
    apply_modifier,
    modify_m1,
    modify_m2,
    modify_m3,
    select_basis,
)
from .errors import (
    ContractError,
    DegenerateMeanError,
    DimensionError,
    DivergenceError,
    DomainError,
    EstimationError,
    IllConditionedError,
    InputParseError,
    InsufficientDataError,
    NumericError,
    SingularStepError,
)
from .harness import (
    ExperimentConfig,
    RiskTable,
    fit_file,
    generate_truth,
    risk_metrics,
    run_experiment,
    sample_dataset,
)
from .likelihood import (
    Dataset,
    EstimatePair,
    constraint_residuals,
    hessian_blocks,
    log_likelihood,
    score,
    sufficient_stats,
)
from .linalg import (
    is_positive_definite,
    rank_two_eigenvalues,
    repair_positive_definite,
    spectral_decompose,
)
from .solvers import (
    METHODS,
    SolverConfig,
    SolverReport,
    as_mle,
    intermediate_mle,
    sc_mle,
    shape_mle,
    smle,
    solve,
)

__all__ = [name for name in dir() if not name.startswith("_")]
