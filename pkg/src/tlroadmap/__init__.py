"""Targeted learning roadmap for point-treatment causal effects on binary outcomes."""

__version__ = "0.1.0"

from .data_model import (  # noqa: E402
    ColumnSpec,
    DataError,
    Dataset,
    ValidationReport,
    complete_cases,
    cut_column,
    design_matrix,
    dichotomize_treatment,
    load_dataset,
    recode_categories,
    validate,
)
from .diagnostics import c_statistic, crude_dose_table, overlap_summary, positivity_table  # noqa: E402
from .learners import LearnerSpec, Loss, fit, parse_learner, predict  # noqa: E402
from .sensitivity import SensitivityCurve, causal_gap_curve  # noqa: E402
from .simulation import DGP_A, DgpSpec, EstimatorConfig, generate, replicate_study, true_psi  # noqa: E402
from .super_learner import SuperLearnerFit, fit_super_learner, make_folds, solve_weights  # noqa: E402
from .tmle import (  # noqa: E402
    EstimationError,
    PositivityError,
    TmleResult,
    estimate,
    fit_nuisances,
    parametric_baseline,
    run_tmle,
    truncation_bound,
)

__all__ = [
    "ColumnSpec",
    "DataError",
    "Dataset",
    "ValidationReport",
    "complete_cases",
    "cut_column",
    "design_matrix",
    "dichotomize_treatment",
    "load_dataset",
    "recode_categories",
    "validate",
    "c_statistic",
    "crude_dose_table",
    "overlap_summary",
    "positivity_table",
    "LearnerSpec",
    "Loss",
    "fit",
    "parse_learner",
    "predict",
    "SensitivityCurve",
    "causal_gap_curve",
    "DGP_A",
    "DgpSpec",
    "EstimatorConfig",
    "generate",
    "replicate_study",
    "true_psi",
    "SuperLearnerFit",
    "fit_super_learner",
    "make_folds",
    "solve_weights",
    "EstimationError",
    "PositivityError",
    "TmleResult",
    "estimate",
    "fit_nuisances",
    "parametric_baseline",
    "run_tmle",
    "truncation_bound",
]
