"""Normal-Normal empirical Bayes: hyperparameters, shrinkage, threshold family.

Model: latent scores ``theta ~ N(mu, tau2)`` and observations
``x | theta ~ N(theta, s)`` with candidate-specific variance ``s`` drawn from
a variance distribution ``g``.  All threshold work happens in standardized
units, ``(x - mu) / tau`` and ``s / tau2``, and is mapped back on output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._normal import norm_cdf, norm_isf, norm_pdf
from .core_types import CandidateStats
from .errors import AllZeroVariance, DegenerateG, DomainError

__all__ = [
    "TAU2_FLOOR",
    "EBModel",
    "ThresholdTable",
    "fit_eb",
    "posterior",
    "theta_quantile",
    "marginal_selection",
    "solve_z_beta",
    "threshold",
    "threshold_std",
    "build_threshold_table",
    "conjugate_variance",
]

TAU2_FLOOR = 1e-8
DEFAULT_MAX_SUPPORT = 2048
Z_LOWER = -50.0


@dataclass(frozen=True, eq=False)
class EBModel:
    """Fitted prior ``N(mu, tau2)`` and plug-in variance distribution.

    ``g_support`` holds equally weighted variance atoms on the original
    (unstandardized) scale.
    """

    mu: float
    tau2: float
    g_support: np.ndarray
    fit_diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        g = np.array(self.g_support, dtype=np.float64).reshape(-1)
        if g.size == 0:
            raise DomainError("g_support must be non-empty")
        if np.any(g < 0) or not np.all(np.isfinite(g)):
            raise DomainError("g_support entries must be finite and non-negative")
        if not self.tau2 > 0:
            raise DomainError(f"tau2 must be positive, got {self.tau2}")
        g.setflags(write=False)
        object.__setattr__(self, "g_support", g)
        object.__setattr__(self, "mu", float(self.mu))
        object.__setattr__(self, "tau2", float(self.tau2))

    @property
    def tau(self) -> float:
        return float(np.sqrt(self.tau2))

    @property
    def g_std(self) -> np.ndarray:
        return self.g_support / self.tau2

    @property
    def degenerate(self) -> bool:
        return not np.any(self.g_support > 0)


def _compress_support(values: np.ndarray, max_support: int | None) -> np.ndarray:
    # equal-mass mid-quantile atoms; duplicating every value leaves them unchanged
    values = np.sort(values)
    if max_support is None or values.size <= max_support:
        return values
    pos = np.floor((np.arange(max_support) + 0.5) / max_support * values.size).astype(np.int64)
    return values[pos]


def fit_eb(
    stats: CandidateStats | tuple[np.ndarray, np.ndarray],
    *,
    allow_zero_variance: bool = False,
    tau2_floor: float = TAU2_FLOOR,
    max_support: int | None = DEFAULT_MAX_SUPPORT,
) -> EBModel:
    """Method-of-moments empirical Bayes fit over all pooled candidates.

    ``mu`` is the grand mean of the observations and ``tau2`` their sample
    variance minus the mean observation variance, floored at ``tau2_floor``.
    The variance distribution is the empirical multiset of observation
    variances, reduced to ``max_support`` equal-mass quantile atoms when
    larger.

    Raises
    ------
    AllZeroVariance
        Every observation variance is zero and ``allow_zero_variance`` is
        false.
    """
    if isinstance(stats, CandidateStats):
        obs, obs_var = stats.obs, stats.obs_var
    else:
        obs, obs_var = stats
    obs = np.asarray(obs, dtype=np.float64).reshape(-1)
    obs_var = np.asarray(obs_var, dtype=np.float64).reshape(-1)
    if obs.size < 2:
        raise DomainError(f"need at least 2 candidates to fit, got {obs.size}")
    if obs.shape != obs_var.shape:
        raise DomainError("obs and obs_var must have the same number of entries")
    if not np.any(obs_var > 0) and not allow_zero_variance:
        raise AllZeroVariance(
            "every observation variance is zero; use the zero-variance (average-then-CP) mode"
        )

    mu = float(obs.mean())
    raw_var = float(obs.var(ddof=1))
    mean_obs_var = float(obs_var.mean())
    raw_tau2 = raw_var - mean_obs_var
    floored = raw_tau2 < tau2_floor
    tau2 = tau2_floor if floored else raw_tau2
    support = _compress_support(obs_var, max_support)
    diagnostics = {
        "n": int(obs.size),
        "obs_variance": raw_var,
        "mean_obs_var": mean_obs_var,
        "raw_tau2": raw_tau2,
        "tau2_floor_active": bool(floored),
        "support_compressed": bool(support.size < obs.size),
    }
    return EBModel(mu=mu, tau2=tau2, g_support=support, fit_diagnostics=diagnostics)


def posterior(obs, obs_var, model: EBModel):
    """Conjugate posterior mean and variance of the latent score."""
    obs = np.asarray(obs, dtype=np.float64)
    obs_var = np.asarray(obs_var, dtype=np.float64)
    denom = model.tau2 + obs_var
    post_mean = (model.tau2 * obs + obs_var * model.mu) / denom
    post_var = model.tau2 * obs_var / denom
    if post_mean.ndim == 0:
        return float(post_mean), float(post_var)
    return post_mean, post_var


def _check_beta(beta):
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(~(beta > 0) | ~(beta < 1)):
        raise DomainError(f"beta must lie in (0, 1), got {beta}")
    return beta


def theta_quantile(beta, model: EBModel):
    """Upper-``beta`` quantile of the prior, ``mu + tau * Phi^-1(1 - beta)``."""
    beta = _check_beta(beta)
    out = model.mu + model.tau * norm_isf(beta)
    return float(out) if np.ndim(out) == 0 else out


def marginal_selection(z, beta, model: EBModel):
    """Fraction of candidates selected at level ``beta`` by offset ``z``.

    Computes ``mean_g[1 - Phi(theta_std * sqrt(1 + s) - z * sqrt(s))]`` in
    standardized units; ``solve_z_beta`` drives this to ``beta``.
    """
    beta = _check_beta(beta)
    theta_std = np.atleast_1d(norm_isf(beta))[:, None]
    s = model.g_std[None, :]
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))[:, None]
    sel = 1.0 - norm_cdf(theta_std * np.sqrt(1.0 + s) - z * np.sqrt(s)).mean(axis=1)
    return float(sel[0]) if np.ndim(beta) == 0 else sel


def solve_z_beta(beta, model: EBModel, *, tol: float = 1e-10, max_iter: int = 200):
    """Standardized offset ``z_beta`` meeting the marginal selection constraint.

    Solves ``F(u) = 1 - beta`` with
    ``F(u) = mean_g Phi(theta_std * sqrt(1 + s) - u * sqrt(s))``.  ``F`` is
    strictly decreasing when ``g`` has positive mass away from zero, so the
    root is unique and any bracket can be shrunk by sign tests alone.  The
    bracket is ``[-50, theta_std]`` for ``beta < 1/2``; for ``beta >= 1/2`` the
    root lies above ``theta_std`` and the upper end is widened from 0 until it
    brackets.  Each step takes the Newton update when it lands strictly inside
    the current bracket and the midpoint otherwise.  Accepts an array of levels
    and solves them jointly.

    Raises
    ------
    DegenerateG
        All variance atoms are zero, so ``F`` does not depend on ``u``.
    """
    beta = _check_beta(beta)
    if model.degenerate:
        raise DegenerateG("variance distribution is a point mass at zero; z_beta is undefined")
    scalar = beta.ndim == 0
    beta = np.atleast_1d(beta)
    target = 1.0 - beta
    theta_std = norm_isf(beta)
    s = model.g_std
    a = theta_std[:, None] * np.sqrt(1.0 + s)[None, :]
    root_s = np.sqrt(s)[None, :]

    def F(u):
        return norm_cdf(a - u[:, None] * root_s).mean(axis=1)

    lo = np.full_like(beta, Z_LOWER)
    hi = np.maximum(theta_std, 0.0)
    for _ in range(64):
        short = F(lo) < target
        if not short.any():
            break
        lo = np.where(short, 2.0 * lo, lo)
    for _ in range(64):
        over = F(hi) > target
        if not over.any():
            break
        hi = np.where(over, 2.0 * hi + 1.0, hi)

    # start from the exact root for a point mass at the mean variance
    s_bar = float(s.mean())
    x = theta_std * (np.sqrt(1.0 + s_bar) - 1.0) / np.sqrt(s_bar)
    x = np.where((x > lo) & (x < hi), x, 0.5 * (lo + hi))
    active = np.arange(beta.size)
    for _ in range(max_iter):
        xa, la, ha = x[active], lo[active], hi[active]
        arg = a[active] - xa[:, None] * root_s
        resid = norm_cdf(arg).mean(axis=1) - target[active]
        slope = -(norm_pdf(arg) * root_s).mean(axis=1)
        la = np.where(resid > 0, xa, la)
        ha = np.where(resid > 0, ha, xa)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            step = xa - resid / slope
        inside = np.isfinite(step) & (step > la) & (step < ha)
        converged = (np.abs(resid) <= 1e-3 * tol) | (ha - la <= 1e-15 * np.maximum(1.0, np.abs(xa)))
        x[active] = np.where(converged, xa, np.where(inside, step, 0.5 * (la + ha)))
        lo[active], hi[active] = la, ha
        active = active[~converged]
        if active.size == 0:
            break
    return float(x[0]) if scalar else x


def threshold_std(theta_std, z_std, s):
    """Standardized threshold ``theta (1 + s) - z sqrt(s (1 + s))``."""
    s = np.asarray(s, dtype=np.float64)
    return theta_std * (1.0 + s) - z_std * np.sqrt(s * (1.0 + s))


def threshold(beta, sigma2, model: EBModel, z_beta=None):
    """Variance-dependent selection threshold on the original score scale.

    Equal to ``theta_beta (1 + s/tau2) - mu s/tau2 - z_beta sqrt(s) sqrt(s + tau2) / tau``
    for ``s = sigma2``; ``z_beta`` is solved from ``model`` when omitted.
    """
    theta = theta_quantile(beta, model)
    if z_beta is None:
        z_beta = solve_z_beta(beta, model)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(sigma2 < 0):
        raise DomainError("sigma2 must be non-negative")
    ratio = sigma2 / model.tau2
    out = (
        theta * (1.0 + ratio)
        - model.mu * ratio
        - z_beta * np.sqrt(sigma2) * np.sqrt(sigma2 + model.tau2) / model.tau
    )
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class ThresholdTable:
    """Per-level ``theta_beta`` (original scale) and ``z_beta`` (standardized)."""

    alpha_grid: np.ndarray
    theta_beta: np.ndarray
    z_beta: np.ndarray
    model: EBModel

    def __post_init__(self):
        for name in ("alpha_grid", "theta_beta", "z_beta"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def grid_size(self) -> int:
        return self.alpha_grid.size

    @property
    def theta_std(self) -> np.ndarray:
        return (self.theta_beta - self.model.mu) / self.model.tau

    def residuals(self) -> np.ndarray:
        return marginal_selection(self.z_beta, self.alpha_grid, self.model) - self.alpha_grid

    def z_at(self, beta: float) -> float:
        """``z_beta`` at an arbitrary level: grid value if on the grid, else solved."""
        hit = np.flatnonzero(self.alpha_grid == beta)
        if hit.size:
            return float(self.z_beta[hit[0]])
        return solve_z_beta(beta, self.model)


def build_threshold_table(model: EBModel, grid_size: int = 999) -> ThresholdTable:
    """Solve ``(theta_beta, z_beta)`` on the uniform grid ``beta_j = j / (G + 1)``."""
    if grid_size < 2:
        raise DomainError(f"grid_size must be at least 2, got {grid_size}")
    grid = np.arange(1, grid_size + 1) / (grid_size + 1)
    z = solve_z_beta(grid, model)
    theta = theta_quantile(grid, model)
    table = ThresholdTable(alpha_grid=grid, theta_beta=theta, z_beta=z, model=model)

    if not np.all(np.diff(theta) < 0):
        raise ArithmeticError("theta_beta is not strictly decreasing on the grid")
    upper = table.theta_std > 0
    if not np.all(z[upper] < table.theta_std[upper]):
        raise ArithmeticError("z_beta >= theta_beta at a level with theta_beta > mu")
    worst = float(np.max(np.abs(table.residuals())))
    if worst > 1e-8:
        raise ArithmeticError(f"marginal constraint residual {worst:.3g} exceeds 1e-8")
    return table


def conjugate_variance(theta_std: float, z_std: float) -> tuple[float, float]:
    """Turning point ``s_star`` and crossing variance ``s_conj`` of the threshold.

    Both are in standardized variance units.  For ``0 < z < theta`` the
    standardized threshold decreases on ``[0, s_star]``, increases after it, and
    returns to ``theta`` at ``s_conj``.  For ``z <= 0`` it increases from 0, so
    both are 0.
    """
    if 0.0 < z_std < theta_std:
        gap = theta_std * theta_std - z_std * z_std
        s_star = 0.5 * (theta_std / np.sqrt(gap) - 1.0)
        s_conj = z_std * z_std / gap
        return float(s_star), float(s_conj)
    if z_std <= 0.0:
        return 0.0, 0.0
    raise DomainError(f"need z < theta, got z={z_std}, theta={theta_std}")
