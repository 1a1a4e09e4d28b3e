"""Shared data model: score tensors, per-candidate statistics, prediction sets."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InvalidTensor

__all__ = [
    "ScoreKind",
    "VarianceMode",
    "Method",
    "ScoreTensor",
    "CandidateStats",
    "PredictionSet",
    "RngSpec",
    "validate_tensor",
    "candidate_stats",
]


class ScoreKind(str, Enum):
    LOGIT = "logit"
    PROBABILITY = "probability"
    EVALUATOR = "evaluator"


class VarianceMode(str, Enum):
    RAW = "raw"
    STANDARD_ERROR = "standard_error"
    # every obs_var forced to 0: the average-then-CP special case
    ZERO = "zero"


class Method(str, Enum):
    CP = "cp"
    CP_AVG = "cp_avg"
    CP_RVALUE = "cp_rvalue"


@dataclass(frozen=True, eq=False)
class ScoreTensor:
    """Scores indexed ``(item, candidate, sample)``.

    ``true_label`` holds one candidate index per item, ``-1`` marking an
    unlabeled item; ``None`` means the tensor carries no labels at all.
    """

    item_ids: tuple[str, ...]
    scores: np.ndarray
    score_kind: ScoreKind = ScoreKind.LOGIT
    true_label: np.ndarray | None = None

    def __post_init__(self):
        scores = np.array(self.scores, dtype=np.float64)
        if scores.ndim != 3:
            raise InvalidTensor(f"scores must be 3-dimensional, got shape {scores.shape}")
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "item_ids", tuple(str(i) for i in self.item_ids))
        object.__setattr__(self, "score_kind", ScoreKind(self.score_kind))
        if len(self.item_ids) != scores.shape[0]:
            raise InvalidTensor(
                f"{len(self.item_ids)} item ids for {scores.shape[0]} items"
            )
        if self.true_label is not None:
            labels = np.array(self.true_label, dtype=np.int64).reshape(-1)
            if labels.shape[0] != scores.shape[0]:
                raise InvalidTensor(
                    f"{labels.shape[0]} labels for {scores.shape[0]} items"
                )
            labels.setflags(write=False)
            object.__setattr__(self, "true_label", labels)

    @property
    def n_items(self) -> int:
        return self.scores.shape[0]

    @property
    def n_candidates(self) -> int:
        return self.scores.shape[1]

    @property
    def n_samples(self) -> int:
        return self.scores.shape[2]

    @property
    def has_labels(self) -> bool:
        return self.true_label is not None and bool(np.all(self.true_label >= 0))

    def subset(self, index) -> "ScoreTensor":
        index = np.asarray(index)
        return ScoreTensor(
            item_ids=[self.item_ids[i] for i in index],
            scores=self.scores[index],
            score_kind=self.score_kind,
            true_label=None if self.true_label is None else self.true_label[index],
        )


def validate_tensor(t: ScoreTensor) -> list[str]:
    """Return a list of violated invariants; empty when ``t`` is valid."""
    problems = []
    n, k, m = t.scores.shape
    if m < 1:
        problems.append(f"need at least one sample per candidate, got M={m}")
    if k < 2:
        problems.append(f"need at least two candidates, got K={k}")
    for idx in np.argwhere(~np.isfinite(t.scores)):
        i, c, s = (int(v) for v in idx)
        problems.append(f"non-finite score at ({i},{c},{s})")
    if t.score_kind is ScoreKind.PROBABILITY:
        finite = np.where(np.isfinite(t.scores), t.scores, 0.5)
        for idx in np.argwhere((finite < 0.0) | (finite > 1.0)):
            i, c, s = (int(v) for v in idx)
            problems.append(
                f"probability score {t.scores[i, c, s]!r} outside [0, 1] at ({i},{c},{s})"
            )
    if t.true_label is not None:
        for i in np.flatnonzero((t.true_label < -1) | (t.true_label >= k)):
            problems.append(
                f"true_label {int(t.true_label[i])} out of range for item {t.item_ids[i]!r}"
            )
    seen = set()
    for item_id in t.item_ids:
        if item_id in seen:
            problems.append(f"duplicate item id {item_id!r}")
        seen.add(item_id)
    return problems


def check_tensor(t: ScoreTensor) -> None:
    problems = validate_tensor(t)
    if problems:
        more = f" (+{len(problems) - 1} more)" if len(problems) > 1 else ""
        raise InvalidTensor(problems[0] + more)


@dataclass(frozen=True, eq=False)
class CandidateStats:
    """Per-candidate summary statistics, each an ``(n_items, K)`` array."""

    mean: np.ndarray
    var: np.ndarray
    obs: np.ndarray
    obs_var: np.ndarray
    mode: VarianceMode


def candidate_stats(
    t: ScoreTensor, mode: VarianceMode | str = VarianceMode.STANDARD_ERROR
) -> CandidateStats:
    """Sample mean and unbiased sample variance over the sample axis.

    ``obs`` is always the mean.  ``obs_var`` is the sample variance (``raw``),
    the variance of the mean, ``var / M`` (``standard_error``), or zero
    (``zero``).  A single sample has variance 0.
    """
    mode = VarianceMode(mode)
    m = t.n_samples
    mean = t.scores.mean(axis=2)
    if m > 1:
        var = t.scores.var(axis=2, ddof=1)
    else:
        var = np.zeros_like(mean)
    if mode is VarianceMode.RAW:
        obs_var = var
    elif mode is VarianceMode.STANDARD_ERROR:
        obs_var = var / m
    else:
        obs_var = np.zeros_like(var)
    return CandidateStats(mean=mean, var=var, obs=mean, obs_var=obs_var, mode=mode)


@dataclass(frozen=True)
class PredictionSet:
    """Candidates admitted for one item, most conforming first.

    ``members`` holds ``(candidate_index, nonconformity)`` pairs sorted by
    nonconformity with ties broken by ascending index.
    """

    item_id: str
    members: tuple[tuple[int, float], ...]
    method: Method

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(i for i, _ in self.members)

    def position(self, candidate: int) -> int | None:
        for pos, (idx, _) in enumerate(self.members):
            if idx == candidate:
                return pos
        return None


@dataclass(frozen=True)
class RngSpec:
    """Seed plus stream id; identical pairs give identical random streams."""

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.stream_id < 0:
            raise ValueError(f"stream_id must be non-negative, got {self.stream_id}")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.stream_id])))

    def child(self, offset: int) -> "RngSpec":
        return RngSpec((self.seed + offset) % 2**64, self.stream_id)
