"""Conformal prediction sets ranked by empirical-Bayes r-values.

Candidates scored by noisy posterior samples are ranked by how confidently
they belong to the top fraction of all candidates, and split conformal
calibration turns those ranks into sets with marginal coverage.
"""

from .conformal import (
    CalibratedPredictor,
    CalibrationConfig,
    EvalReport,
    calibrate,
    evaluate,
    predict,
)
from .core_types import (
    Method,
    PredictionSet,
    RngSpec,
    ScoreKind,
    ScoreTensor,
    VarianceMode,
    candidate_stats,
    validate_tensor,
)
from .eb_normal import EBModel, ThresholdTable, build_threshold_table, fit_eb
from .errors import InputError, RVCPError, StatisticalError
from .rvalue import Estimator, r_nonparametric, r_parametric

__version__ = "0.1.0"

__all__ = [
    "CalibratedPredictor",
    "CalibrationConfig",
    "EBModel",
    "Estimator",
    "EvalReport",
    "InputError",
    "Method",
    "PredictionSet",
    "RVCPError",
    "RngSpec",
    "ScoreKind",
    "ScoreTensor",
    "StatisticalError",
    "ThresholdTable",
    "VarianceMode",
    "build_threshold_table",
    "calibrate",
    "candidate_stats",
    "evaluate",
    "fit_eb",
    "predict",
    "r_nonparametric",
    "r_parametric",
    "validate_tensor",
]
