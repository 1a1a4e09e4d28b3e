"""Parametric and nonparametric r-values.

The r-value of a candidate is the smallest top fraction ``beta`` at which it
clears the level-``beta`` selection bar.  Smaller is stronger.  Both
estimators return arrays shaped like their inputs, with values in ``(0, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from ._normal import norm_sf
from .core_types import ScoreTensor
from .eb_normal import EBModel, ThresholdTable
from .errors import DomainError, EmptyPopulation

__all__ = [
    "Estimator",
    "RValueMatrix",
    "r_parametric",
    "r_zero_variance",
    "rank_profile",
    "lambda_table",
    "r_nonparametric",
]

_CHUNK = 4096


class Estimator(str, Enum):
    PARAMETRIC = "parametric"
    NONPARAMETRIC = "nonparametric"


@dataclass(frozen=True, eq=False)
class RValueMatrix:
    item_ids: tuple[str, ...]
    values: np.ndarray
    estimator: Estimator
    lambda_rule: str | None = None


def r_zero_variance(obs, model: EBModel, floor: float = 0.0):
    """r-value of a zero-variance observation: ``1 - Phi((obs - mu) / tau)``."""
    obs = np.asarray(obs, dtype=np.float64)
    return np.clip(norm_sf((obs - model.mu) / model.tau), floor, 1.0)


def _first_pass_bisect(x, s, q, theta, z):
    g = theta.size
    lo = np.zeros(x.size, dtype=np.int64)
    hi = np.full(x.size, g, dtype=np.int64)
    while np.any(lo < hi):
        mid = np.minimum((lo + hi) // 2, g - 1)
        ok = x >= theta[mid] * (1.0 + s) - z[mid] * q
        open_ = lo < hi
        hi = np.where(open_ & ok, mid, hi)
        lo = np.where(open_ & ~ok, mid + 1, lo)
    hit = lo < g
    return np.where(hit, lo, 0), hit


def r_parametric(
    obs,
    obs_var,
    table: ThresholdTable | None,
    *,
    model: EBModel | None = None,
    refine: bool = True,
) -> np.ndarray:
    """Parametric r-values ``inf{beta : obs >= t_beta(obs_var)}``.

    The grid is scanned for the first level each candidate clears.  With
    ``refine`` the infimum is then located inside the bracketing grid cell,
    treating ``z_beta`` as linear in ``theta_beta`` between neighbouring grid
    points; the threshold is then linear in ``theta`` on the cell and the
    crossing is solved in closed form.  Zero-variance candidates get the exact
    value ``1 - Phi((obs - mu) / tau)``.  Candidates that clear no grid level
    get 1.  Results are clipped to ``[1 / (G + 1), 1]``.

    ``table`` may be ``None`` only when every ``obs_var`` is zero, in which
    case ``model`` supplies ``mu`` and ``tau``.
    """
    obs = np.asarray(obs, dtype=np.float64)
    obs_var = np.asarray(obs_var, dtype=np.float64)
    if obs.shape != obs_var.shape:
        raise DomainError("obs and obs_var shapes differ")
    if table is None:
        if model is None or np.any(obs_var > 0):
            raise DomainError("a threshold table is required for non-zero variances")
        return r_zero_variance(obs, model)
    model = table.model
    grid = table.alpha_grid
    floor = grid[0]
    theta = table.theta_std
    z = table.z_beta

    x = ((obs - model.mu) / model.tau).reshape(-1)
    s = (obs_var / model.tau2).reshape(-1)
    q = np.sqrt(s * (1.0 + s))
    out = np.ones_like(x)

    # t_j(s) = theta_j (1 + s) - z_j q falls with j for every s >= 0 when z
    # never drops faster than theta between neighbours (q < 1 + s); the
    # first passing level can then be found by bisection
    monotone = bool(np.all(np.diff(theta) + np.maximum(-np.diff(z), 0.0) < 0))

    for start in range(0, x.size, _CHUNK):
        sl = slice(start, start + _CHUNK)
        xc, sc, qc = x[sl], s[sl], q[sl]
        if monotone:
            first, hit = _first_pass_bisect(xc, sc, qc, theta, z)
        else:
            passes = xc[:, None] >= theta[None, :] * (1.0 + sc[:, None]) - z[None, :] * qc[:, None]
            hit = passes.any(axis=1)
            first = np.argmax(passes, axis=1)
        r = np.where(hit, grid[first], 1.0)
        if refine:
            cell = hit & (first > 0)
            j = first[cell]
            th_a, th_b = theta[j - 1], theta[j]
            z_a, z_b = z[j - 1], z[j]
            slope = (z_b - z_a) / (th_b - th_a)
            # h(th) = x - th (1 + s) + (z_a + (th - th_a) slope) q, zero at the crossing
            coef = slope * qc[cell] - (1.0 + sc[cell])
            const = xc[cell] + (z_a - th_a * slope) * qc[cell]
            with np.errstate(divide="ignore", invalid="ignore"):
                th_star = -const / coef
            th_star = np.clip(np.where(np.isfinite(th_star), th_star, th_b), th_b, th_a)
            r[cell] = norm_sf(th_star)
        out[sl] = r

    if refine:
        zero = s == 0
        out[zero] = norm_sf(x[zero])
    return np.clip(out, floor, 1.0).reshape(obs.shape)


def rank_profile(t: ScoreTensor) -> np.ndarray:
    """Top-``k`` membership frequencies, shape ``(n_items, K, K)``.

    Entry ``[i, c, k - 1]`` is the fraction of samples in which candidate
    ``c`` of item ``i`` ranks among the top ``k``.  Within a sample,
    candidates are ordered by descending score; equal scores go to the lower
    candidate index first.
    """
    n, k, m = t.scores.shape
    # stable sort on the negated scores keeps index order among ties
    order = np.argsort(-t.scores, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(k)[None, :, None], axis=1)
    flat = (np.arange(n * k).reshape(n, k, 1) * k + ranks).reshape(-1)
    counts = np.bincount(flat, minlength=n * k * k).reshape(n, k, k)
    return np.cumsum(counts, axis=2) / m


def lambda_table(profiles: np.ndarray) -> np.ndarray:
    """Quantile-matched bars ``lambda_{k/K}`` from a reference population.

    For each level ``k`` the bar is the smallest observed frequency ``v`` with
    at most ``k N`` of the ``N K`` pooled candidates at or above ``v``, so the
    pass fraction matches ``k / K`` up to ties, which are resolved toward
    the larger bar.  If even the largest value is shared by more than
    ``k N`` candidates, the bar is that largest value.
    """
    profiles = np.asarray(profiles, dtype=np.float64)
    if profiles.ndim != 3 or profiles.shape[1] != profiles.shape[2]:
        raise DomainError(f"profiles must have shape (N, K, K), got {profiles.shape}")
    n, k, _ = profiles.shape
    if n * k < 2:
        raise EmptyPopulation("reference population needs at least 2 candidates")
    pooled = profiles.reshape(n * k, k)
    lambdas = np.empty(k)
    for level in range(1, k + 1):
        col = np.sort(pooled[:, level - 1])[::-1]
        target = level * n
        lam = col[target - 1]
        if target < col.size and col[target] == lam:
            bigger = col[:target][col[:target] > lam]
            lam = bigger[-1] if bigger.size else lam
        lambdas[level - 1] = lam
    return lambdas


def r_nonparametric(profiles: np.ndarray, lambdas: np.ndarray, *, refine: bool = True) -> np.ndarray:
    """``min{k / K : V_{k/K} >= lambda_{k/K}}`` per candidate, 1 if never.

    With ``refine`` the crossing is placed inside ``((k - 1)/K, k/K]`` by
    linear interpolation of ``V - lambda`` between the last failing and first
    passing level, which removes most exact ties between candidates.  A
    candidate passing at the first level keeps ``1/K``.
    """
    profiles = np.asarray(profiles, dtype=np.float64)
    k = profiles.shape[-1]
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if lambdas.shape != (k,):
        raise DomainError(f"need {k} lambda values, got {lambdas.shape}")
    gap = profiles - lambdas
    passes = gap >= 0
    hit = passes.any(axis=-1)
    first = np.argmax(passes, axis=-1)
    r = np.where(hit, (first + 1) / k, 1.0)
    if refine:
        cell = hit & (first > 0)
        at = np.take_along_axis(gap, first[..., None], axis=-1)[..., 0][cell]
        before = np.take_along_axis(gap, np.maximum(first - 1, 0)[..., None], axis=-1)[..., 0][cell]
        # before < 0 <= at, so the fraction lies in (0, 1]
        r[cell] = (first[cell] + (-before) / (at - before)) / k
    return r
