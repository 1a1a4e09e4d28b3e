"""Split-conformal calibration and prediction for CP, CP_avg and CP_rvalue.

All three methods share one orientation: lower nonconformity means more
conforming, and a candidate enters the set iff its nonconformity is strictly
below the calibrated threshold.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core_types import (
    CandidateStats,
    Method,
    PredictionSet,
    ScoreKind,
    ScoreTensor,
    VarianceMode,
    candidate_stats,
    check_tensor,
)
from .eb_normal import EBModel, ThresholdTable, build_threshold_table, fit_eb
from .errors import (
    DomainError,
    InsufficientCalibration,
    MissingLabels,
    MissingSample,
    ShapeMismatch,
)
from .rvalue import Estimator, lambda_table, r_nonparametric, r_parametric, rank_profile

__all__ = [
    "CalibrationConfig",
    "CalibratedPredictor",
    "EvalReport",
    "conformal_rank",
    "order_statistic",
    "nonconformity",
    "calibrate",
    "predict",
    "evaluate",
]


@dataclass(frozen=True)
class CalibrationConfig:
    estimator: Estimator = Estimator.PARAMETRIC
    variance_mode: VarianceMode = VarianceMode.STANDARD_ERROR
    grid_size: int = 999
    refine: bool = True
    sample_index: int = 0
    max_support: int | None = 2048

    def __post_init__(self):
        object.__setattr__(self, "estimator", Estimator(self.estimator))
        object.__setattr__(self, "variance_mode", VarianceMode(self.variance_mode))
        if self.grid_size < 2:
            raise DomainError(f"grid_size must be at least 2, got {self.grid_size}")
        if self.sample_index < 0:
            raise DomainError(f"sample_index must be non-negative, got {self.sample_index}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["estimator"] = self.estimator.value
        d["variance_mode"] = self.variance_mode.value
        return d


@dataclass(frozen=True, eq=False)
class CalibratedPredictor:
    """Frozen threshold plus whatever the nonconformity score needs at test time."""

    method: Method
    alpha: float
    threshold: float
    n_cal: int
    rank: int
    n_candidates: int
    score_kind: ScoreKind
    config: CalibrationConfig = field(default_factory=CalibrationConfig)
    model: EBModel | None = None
    table: ThresholdTable | None = None
    lambdas: np.ndarray | None = None

    @property
    def sample_index(self) -> int | None:
        return self.config.sample_index if self.method is Method.CP else None


def conformal_rank(n: int, alpha: float) -> int:
    """1-indexed rank ``ceil((n + 1)(1 - alpha))`` of the calibration threshold."""
    if not 0 < alpha < 1:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    # absorb binary rounding such as 20 * 0.95 = 18.999999999999996
    return math.ceil(round((n + 1) * (1.0 - alpha), 9))


def order_statistic(scores, rank: int) -> float:
    """``rank``-th smallest value (1-indexed), duplicates counted separately."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not 1 <= rank <= scores.size:
        raise InsufficientCalibration(
            f"rank {rank} outside 1..{scores.size} calibration scores"
        )
    return float(np.partition(scores, rank - 1)[rank - 1])


def _raw_nonconformity(values: np.ndarray, kind: ScoreKind) -> np.ndarray:
    if kind is ScoreKind.PROBABILITY:
        return 1.0 - values
    return -values


def _rvalues(t: ScoreTensor, stats: CandidateStats | None, pred_like) -> np.ndarray:
    cfg = pred_like.config
    if cfg.estimator is Estimator.NONPARAMETRIC:
        return r_nonparametric(rank_profile(t), pred_like.lambdas, refine=cfg.refine)
    return r_parametric(
        stats.obs, stats.obs_var, pred_like.table, model=pred_like.model, refine=cfg.refine
    )


def nonconformity(
    method: Method | str,
    t: ScoreTensor,
    predictor: CalibratedPredictor | None = None,
    *,
    config: CalibrationConfig | None = None,
) -> np.ndarray:
    """Nonconformity of every candidate, shape ``(n_items, K)``.

    ``cp`` uses one posterior sample, ``cp_avg`` the per-candidate mean; both
    map probabilities to ``1 - p`` and other score kinds to ``-score``.
    ``cp_rvalue`` returns r-values and needs a calibrated ``predictor`` for its
    frozen model, table or lambda bars.
    """
    method = Method(method)
    config = config or (predictor.config if predictor is not None else CalibrationConfig())
    if method is Method.CP:
        j = config.sample_index
        if j >= t.n_samples:
            raise MissingSample(f"sample_index {j} but tensor has M={t.n_samples} samples")
        return _raw_nonconformity(t.scores[:, :, j], t.score_kind)
    if method is Method.CP_AVG:
        return _raw_nonconformity(t.scores.mean(axis=2), t.score_kind)
    if predictor is None:
        raise DomainError("cp_rvalue nonconformity needs a calibrated predictor")
    stats = None
    if config.estimator is Estimator.PARAMETRIC:
        stats = candidate_stats(t, config.variance_mode)
    return _rvalues(t, stats, predictor)


def calibrate(
    t_cal: ScoreTensor,
    alpha: float,
    method: Method | str,
    config: CalibrationConfig | None = None,
) -> CalibratedPredictor:
    """Fit any frozen artifacts on ``t_cal`` and set the conformal threshold.

    The threshold is the ``ceil((n + 1)(1 - alpha))``-th smallest true-label
    nonconformity.  For ``cp_rvalue`` the empirical Bayes model and threshold
    table (parametric) or the lambda bars (nonparametric) are fit on the
    calibration tensor only.

    Raises
    ------
    MissingLabels
        Some calibration item has no true label.
    InsufficientCalibration
        ``ceil((n + 1)(1 - alpha)) > n``.
    """
    method = Method(method)
    config = config or CalibrationConfig()
    check_tensor(t_cal)
    if not t_cal.has_labels:
        raise MissingLabels("every calibration item needs a true_label")
    n = t_cal.n_items
    rank = conformal_rank(n, alpha)
    if rank > n:
        raise InsufficientCalibration(
            f"ceil((n+1)(1-alpha)) = ceil({n + 1}*{1 - alpha:g}) = {rank} exceeds n = {n}; "
            "need more calibration items or a larger alpha"
        )
    if method is Method.CP and config.sample_index >= t_cal.n_samples:
        raise MissingSample(
            f"sample_index {config.sample_index} but tensor has M={t_cal.n_samples} samples"
        )

    model = table = lambdas = None
    items = np.arange(n)
    labels = t_cal.true_label
    if method is Method.CP_RVALUE:
        if config.estimator is Estimator.PARAMETRIC:
            stats = candidate_stats(t_cal, config.variance_mode)
            model = fit_eb(
                stats,
                allow_zero_variance=config.variance_mode is VarianceMode.ZERO,
                max_support=config.max_support,
            )
            if not model.degenerate:
                table = build_threshold_table(model, config.grid_size)
            true_scores = r_parametric(
                stats.obs[items, labels],
                stats.obs_var[items, labels],
                table,
                model=model,
                refine=config.refine,
            )
        else:
            profiles = rank_profile(t_cal)
            lambdas = lambda_table(profiles)
            true_scores = r_nonparametric(profiles[items, labels], lambdas, refine=config.refine)
    else:
        true_scores = nonconformity(method, t_cal, config=config)[items, labels]

    return CalibratedPredictor(
        method=method,
        alpha=float(alpha),
        threshold=order_statistic(true_scores, rank),
        n_cal=n,
        rank=rank,
        n_candidates=t_cal.n_candidates,
        score_kind=t_cal.score_kind,
        config=config,
        model=model,
        table=table,
        lambdas=lambdas,
    )


def sets_from_scores(
    item_ids: Sequence[str], scores: np.ndarray, threshold: float, method: Method
) -> list[PredictionSet]:
    out = []
    for item_id, row in zip(item_ids, scores):
        idx = np.flatnonzero(row < threshold)
        order = idx[np.lexsort((idx, row[idx]))]
        members = tuple((int(i), float(row[i])) for i in order)
        out.append(PredictionSet(item_id=item_id, members=members, method=method))
    return out


def predict(pred: CalibratedPredictor, t_test: ScoreTensor) -> list[PredictionSet]:
    """Prediction set per test item: candidates with nonconformity below threshold."""
    check_tensor(t_test)
    if t_test.n_candidates != pred.n_candidates:
        raise ShapeMismatch(
            f"test tensor has K={t_test.n_candidates}, predictor was calibrated with "
            f"K={pred.n_candidates}"
        )
    if t_test.score_kind is not pred.score_kind:
        raise ShapeMismatch(
            f"test score_kind {t_test.score_kind.value!r} differs from calibration "
            f"{pred.score_kind.value!r}"
        )
    scores = nonconformity(pred.method, t_test, pred)
    return sets_from_scores(t_test.item_ids, scores, pred.threshold, pred.method)


@dataclass(frozen=True)
class EvalReport:
    """Coverage and efficiency of a batch of prediction sets.

    ``mean_true_index`` is the mean 0-based position of the true label within
    covered sets, ``None`` when nothing is covered.  ``std_size`` is the
    population standard deviation.
    """

    n_items: int
    coverage: float
    mean_size: float
    std_size: float
    mean_true_index: float | None
    n_empty: int
    items: tuple[dict, ...] = ()

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("items")
        return d

    def to_dict(self) -> dict:
        d = self.summary()
        d["items"] = [dict(r) for r in self.items]
        return d


def evaluate(
    sets: Sequence[PredictionSet],
    truth: ScoreTensor | Mapping[str, int] | Sequence[int],
) -> EvalReport:
    """Empirical coverage, set-size moments and true-label position."""
    if isinstance(truth, ScoreTensor):
        if truth.true_label is None:
            raise MissingLabels("truth tensor carries no labels")
        label_of = dict(zip(truth.item_ids, (int(v) for v in truth.true_label)))
    elif isinstance(truth, Mapping):
        label_of = {str(k): int(v) for k, v in truth.items()}
    else:
        labels = list(truth)
        if len(labels) != len(sets):
            raise ShapeMismatch(f"{len(labels)} labels for {len(sets)} sets")
        label_of = {s.item_id: int(v) for s, v in zip(sets, labels)}

    records = []
    for ps in sets:
        if ps.item_id not in label_of or label_of[ps.item_id] < 0:
            raise MissingLabels(f"no true label for item {ps.item_id!r}")
        pos = ps.position(label_of[ps.item_id])
        records.append(
            {"item_id": ps.item_id, "size": ps.size, "covered": pos is not None, "true_index": pos}
        )
    n = len(records)
    sizes = np.array([r["size"] for r in records], dtype=np.float64)
    covered_pos = [r["true_index"] for r in records if r["covered"]]
    return EvalReport(
        n_items=n,
        coverage=float(len(covered_pos) / n) if n else 0.0,
        mean_size=float(sizes.mean()) if n else 0.0,
        std_size=float(sizes.std()) if n else 0.0,
        mean_true_index=float(np.mean(covered_pos)) if covered_pos else None,
        n_empty=int(np.sum(sizes == 0)),
        items=tuple(records),
    )
