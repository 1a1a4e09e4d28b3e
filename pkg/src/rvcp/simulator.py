"""Synthetic Normal-Normal data and packaged desk-scale experiments."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from ._normal import norm_cdf, norm_isf, norm_sf
from .conformal import (
    CalibratedPredictor,
    CalibrationConfig,
    calibrate,
    evaluate,
    predict,
)
from .core_types import Method, RngSpec, ScoreKind, ScoreTensor, VarianceMode, candidate_stats
from .eb_normal import conjugate_variance, threshold
from .errors import DomainError
from .rvalue import Estimator

__all__ = [
    "VarianceDist",
    "GenerativeSpec",
    "Latent",
    "generate",
    "METHODS",
    "MethodSpec",
    "run_methods",
    "ExperimentResult",
    "EXPERIMENTS",
    "run_experiment",
    "inclusion_probability",
    "ToyProbability",
    "toy_variance_probability",
    "worker_count",
    "compare_on_tensors",
    "REPORTED_TOY_PROBABILITY",
]

REPORTED_TOY_PROBABILITY = 0.4847


@dataclass(frozen=True)
class VarianceDist:
    """Distribution ``g`` of per-candidate score variances.

    ``point(s)``; ``two_point(s1, s2, w)`` puts mass ``w`` on ``s1``;
    ``lognormal(m, v)`` is ``exp(N(m, v))``; ``uniform(a, b)``.
    """

    kind: str
    params: tuple[float, ...]

    _ARITY = {"point": 1, "two_point": 3, "lognormal": 2, "uniform": 2}

    def __post_init__(self):
        if self.kind not in self._ARITY:
            raise DomainError(f"unknown variance distribution {self.kind!r}")
        params = tuple(float(p) for p in self.params)
        if len(params) != self._ARITY[self.kind]:
            raise DomainError(f"{self.kind} takes {self._ARITY[self.kind]} parameters")
        if self.kind == "point" and params[0] < 0:
            raise DomainError("variance must be non-negative")
        if self.kind == "two_point" and (min(params[:2]) < 0 or not 0 <= params[2] <= 1):
            raise DomainError("two_point needs non-negative variances and w in [0, 1]")
        if self.kind == "lognormal" and params[1] < 0:
            raise DomainError("lognormal log-variance must be non-negative")
        if self.kind == "uniform" and not 0 <= params[0] <= params[1]:
            raise DomainError("uniform needs 0 <= a <= b")
        object.__setattr__(self, "params", params)

    @classmethod
    def point(cls, s):
        return cls("point", (s,))

    @classmethod
    def two_point(cls, s1, s2, w):
        return cls("two_point", (s1, s2, w))

    @classmethod
    def lognormal(cls, m, v):
        return cls("lognormal", (m, v))

    @classmethod
    def uniform(cls, a, b):
        return cls("uniform", (a, b))

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        p = self.params
        if self.kind == "point":
            return np.full(size, p[0])
        if self.kind == "two_point":
            return np.where(rng.random(size) < p[2], p[0], p[1])
        if self.kind == "lognormal":
            return np.exp(rng.normal(p[0], np.sqrt(p[1]), size))
        return rng.uniform(p[0], p[1], size)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": list(self.params)}

    @classmethod
    def from_dict(cls, d) -> "VarianceDist":
        return cls(d["kind"], tuple(d["params"]))


@dataclass(frozen=True)
class GenerativeSpec:
    mu: float = 0.0
    tau2: float = 1.0
    g: VarianceDist = field(default_factory=lambda: VarianceDist.two_point(0.1, 4.0, 0.2))
    K: int = 100
    M: int = 50
    n_cal: int = 500
    n_test: int = 500
    true_label_rule: str = "argmax_theta"
    rng: RngSpec = field(default_factory=lambda: RngSpec(0))

    def __post_init__(self):
        if self.tau2 < 0:
            raise DomainError("tau2 must be non-negative")
        if self.K < 2 or self.M < 1 or self.n_cal < 1 or self.n_test < 0:
            raise DomainError("need K >= 2, M >= 1, n_cal >= 1, n_test >= 0")
        if self.true_label_rule != "argmax_theta":
            raise DomainError(f"unsupported true_label_rule {self.true_label_rule!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["g"] = self.g.to_dict()
        d["rng"] = {"seed": self.rng.seed, "stream_id": self.rng.stream_id}
        return d

    @classmethod
    def from_dict(cls, d) -> "GenerativeSpec":
        d = dict(d)
        if "g" in d:
            d["g"] = VarianceDist.from_dict(d["g"])
        if "rng" in d:
            d["rng"] = RngSpec(**d["rng"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DomainError(f"unknown spec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Latent:
    theta_cal: np.ndarray
    sigma2_cal: np.ndarray
    theta_test: np.ndarray
    sigma2_test: np.ndarray


def generate(spec: GenerativeSpec) -> tuple[ScoreTensor, ScoreTensor, Latent]:
    """Draw calibration and test tensors from the Normal-Normal model.

    Per candidate: ``theta ~ N(mu, tau2)``, ``sigma2 ~ g``, then ``M`` scores
    ``~ N(theta, sigma2)``.  The true label is the candidate with the largest
    ``theta``.
    """
    rng = spec.rng.generator()
    n = spec.n_cal + spec.n_test
    theta = spec.mu + np.sqrt(spec.tau2) * rng.standard_normal((n, spec.K))
    sigma2 = spec.g.sample(rng, (n, spec.K))
    noise = rng.standard_normal((n, spec.K, spec.M))
    scores = theta[:, :, None] + np.sqrt(sigma2)[:, :, None] * noise
    labels = np.argmax(theta, axis=1)

    def tensor(prefix, sl):
        ids = [f"{prefix}-{i:06d}" for i in range(sl.stop - sl.start)]
        return ScoreTensor(ids, scores[sl], ScoreKind.LOGIT, labels[sl])

    cal = slice(0, spec.n_cal)
    test = slice(spec.n_cal, n)
    latent = Latent(theta[cal], sigma2[cal], theta[test], sigma2[test])
    return tensor("cal", cal), tensor("test", test), latent


@dataclass(frozen=True)
class MethodSpec:
    """One calibrated variant compared in an experiment."""

    label: str
    method: Method
    estimator: Estimator = Estimator.PARAMETRIC
    variance_mode: VarianceMode | None = None

    def config(self, base: CalibrationConfig) -> CalibrationConfig:
        changes = {"estimator": self.estimator}
        if self.variance_mode is not None:
            changes["variance_mode"] = self.variance_mode
        return replace(base, **changes)


METHODS = (
    MethodSpec("cp", Method.CP),
    MethodSpec("cp_avg", Method.CP_AVG),
    MethodSpec("cp_rvalue", Method.CP_RVALUE, Estimator.PARAMETRIC),
    MethodSpec("cp_rvalue_np", Method.CP_RVALUE, Estimator.NONPARAMETRIC),
)


def run_methods(
    t_cal: ScoreTensor,
    t_test: ScoreTensor,
    alpha: float,
    methods: Sequence[MethodSpec] = METHODS,
    config: CalibrationConfig | None = None,
):
    """Calibrate and evaluate each method on one split.

    Returns ``{label: (predictor, sets, report)}``.
    """
    config = config or CalibrationConfig()
    out = {}
    for m in methods:
        pred = calibrate(t_cal, alpha, m.method, m.config(config))
        sets = predict(pred, t_test)
        out[m.label] = (pred, sets, evaluate(sets, t_test))
    return out


def inclusion_probability(
    method: Method | str, mu0: float, sigma2: float, pred: CalibratedPredictor
) -> float:
    """Probability that a false candidate with ``theta = mu0`` and variance
    ``sigma2`` enters the set, given the frozen calibration ``pred``.

    Standard CP (and CP_avg) include the candidate when its score exceeds a
    fixed cut ``T``, giving ``1 - Phi((T - mu0) / sigma)``.  Parametric
    CP_rvalue includes it when the score clears ``t_{r*}(sigma2)``, giving
    ``1 - Phi((t_{r*}(sigma2) - mu0) / sigma)``.
    """
    method = Method(method)
    if pred.method is not method:
        raise DomainError(f"predictor was calibrated for {pred.method.value}, not {method.value}")
    sigma = float(np.sqrt(sigma2))
    if not sigma > 0:
        raise DomainError("sigma2 must be positive")
    if method in (Method.CP, Method.CP_AVG):
        if pred.score_kind is ScoreKind.PROBABILITY:
            cut = 1.0 - pred.threshold
        else:
            cut = -pred.threshold
    else:
        if pred.config.estimator is not Estimator.PARAMETRIC or pred.model is None:
            raise DomainError("inclusion probability needs a parametric r-value calibration")
        r_star = pred.threshold
        z = pred.table.z_at(r_star) if pred.table is not None else 0.0
        cut = threshold(r_star, sigma2, pred.model, z_beta=z)
    return float(norm_sf((cut - mu0) / sigma))


@dataclass(frozen=True)
class ToyProbability:
    analytic: float
    monte_carlo: float
    mc_standard_error: float
    n_draws: int
    reported_value: float = REPORTED_TOY_PROBABILITY

    @property
    def reported_gap(self) -> float:
        return self.analytic - self.reported_value

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reported_gap"] = self.reported_gap
        return d


def toy_variance_probability(
    n_draws: int = 10**7, rng: RngSpec = RngSpec(0), chunk: int = 10**6
) -> ToyProbability:
    """``P(q > p)`` for ``p ~ N(1, 1)`` and ``q ~ N(0, 1000)``.

    ``q - p ~ N(-1, 1001)``, so the exact value is ``Phi(-1 / sqrt(1001))``.
    The Monte Carlo estimate uses ``n_draws`` seeded pairs.
    """
    analytic = float(norm_cdf(-1.0 / np.sqrt(1001.0)))
    gen = rng.generator()
    hits = 0
    left = n_draws
    while left > 0:
        m = min(chunk, left)
        p = gen.normal(1.0, 1.0, m)
        q = gen.normal(0.0, np.sqrt(1000.0), m)
        hits += int(np.count_nonzero(q > p))
        left -= m
    est = hits / n_draws
    return ToyProbability(
        analytic=analytic,
        monte_carlo=est,
        mc_standard_error=float(np.sqrt(est * (1 - est) / n_draws)),
        n_draws=n_draws,
    )


# --- experiments -------------------------------------------------------------

EXPERIMENTS = (
    "coverage_sweep",
    "setsize_vs_avg",
    "setsize_vs_std",
    "instability_demo",
    "zero_variance_reduction",
    "asymptotic_rejection",
)

_PAIRS = (("cp_rvalue", "cp_avg"), ("cp_rvalue", "cp"), ("cp_rvalue_np", "cp_avg"), ("cp_rvalue_np", "cp"))
_SIGMAS = (1.0, 10.0, 100.0, 1000.0)


def worker_count() -> int:
    """Workers for trial-level parallelism; ``RVCP_THREADS=0`` or unset means all cores."""
    raw = os.environ.get("RVCP_THREADS", "0").strip() or "0"
    n = int(raw)
    return max(1, os.cpu_count() or 1) if n <= 0 else n


def _setsize_trial(spec, alphas, config, methods):
    t_cal, t_test, _ = generate(spec)
    out = {}
    for alpha in alphas:
        runs = run_methods(t_cal, t_test, alpha, methods, config)
        row = {
            label: {
                "coverage": rep.coverage,
                "mean_size": rep.mean_size,
                "mean_true_index": rep.mean_true_index,
                "n_empty": rep.n_empty,
            }
            for label, (_, _, rep) in runs.items()
        }
        if "cp_rvalue" in runs:
            pred = runs["cp_rvalue"][0]
            if pred.table is not None:
                r_star = pred.threshold
                theta_std = float(norm_isf(r_star))
                z = pred.table.z_at(r_star)
                if theta_std > 0 and z < theta_std:
                    _, s_conj = conjugate_variance(theta_std, z)
                    s = candidate_stats(t_test, pred.config.variance_mode).obs_var / pred.model.tau2
                    row["fraction_above_s_conj"] = float(np.mean(s >= s_conj))
                    row["s_conj"] = s_conj
        out[alpha] = row
    return out


def _zero_variance_trial(spec, alphas, config, methods):
    t_cal, t_test, _ = generate(spec)
    zero = replace(config, variance_mode=VarianceMode.ZERO, estimator=Estimator.PARAMETRIC)
    out = {}
    for alpha in alphas:
        avg = predict(calibrate(t_cal, alpha, Method.CP_AVG, zero), t_test)
        rv = predict(calibrate(t_cal, alpha, Method.CP_RVALUE, zero), t_test)
        same = [a.indices == b.indices for a, b in zip(avg, rv)]
        out[alpha] = {"identical_fraction": float(np.mean(same)), "n_items": len(same)}
    return out


def _instability_trial(spec, alphas, config, methods, max_samples=20):
    t_cal, t_test, _ = generate(spec)
    out = {}
    n_idx = min(spec.M, max_samples)
    for alpha in alphas:
        per_sample = []
        for j in range(n_idx):
            pred = calibrate(t_cal, alpha, Method.CP, replace(config, sample_index=j))
            per_sample.append([s.indices for s in predict(pred, t_test)])
        distinct = [len({frozenset(per_sample[j][i]) for j in range(n_idx)}) for i in range(t_test.n_items)]
        out[alpha] = {
            "n_sample_indices": n_idx,
            "fraction_unstable": float(np.mean(np.array(distinct) > 1)),
            "mean_distinct_sets": float(np.mean(distinct)),
            "distinct_sets_per_item": distinct,
        }
    return out


def _asymptotic_trial(spec, alphas, config, methods):
    t_cal, _, _ = generate(spec)
    out = {}
    for alpha in alphas:
        std = calibrate(t_cal, alpha, Method.CP, config)
        rv = calibrate(t_cal, alpha, Method.CP_RVALUE, replace(config, estimator=Estimator.PARAMETRIC))
        out[alpha] = {
            "T_std": -std.threshold,
            "r_star": rv.threshold,
            "sigma": list(_SIGMAS),
            "std": [inclusion_probability(Method.CP, 0.0, s * s, std) for s in _SIGMAS],
            "rvalue": [inclusion_probability(Method.CP_RVALUE, 0.0, s * s, rv) for s in _SIGMAS],
        }
    return out


_TRIALS = {
    "coverage_sweep": _setsize_trial,
    "setsize_vs_avg": _setsize_trial,
    "setsize_vs_std": _setsize_trial,
    "instability_demo": _instability_trial,
    "zero_variance_reduction": _zero_variance_trial,
    "asymptotic_rejection": _asymptotic_trial,
}


def _call_trial(args):
    fn, spec, alphas, config, methods = args
    return fn(spec, alphas, config, methods)


def _mean_se(values):
    v = np.asarray([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return None, None
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else None
    return float(v.mean()), se


@dataclass(frozen=True)
class ExperimentResult:
    """Trial-averaged metrics.

    ``methods[alpha][label]`` maps each metric to ``{"mean", "se"}`` over
    trials; ``paired[alpha]["a - b"]`` holds the paired mean set-size
    difference with its standard error; ``extra`` carries experiment-specific
    summaries; ``trials`` keeps the per-trial records.
    """

    name: str
    config: dict
    alphas: tuple[float, ...]
    n_trials: int
    methods: dict
    paired: dict
    extra: dict
    trials: tuple = ()

    def to_dict(self, include_trials: bool = False) -> dict:
        d = {
            "name": self.name,
            "config": self.config,
            "alphas": list(self.alphas),
            "n_trials": self.n_trials,
            "methods": {str(a): v for a, v in self.methods.items()},
            "paired": {str(a): v for a, v in self.paired.items()},
            "extra": {str(a): v for a, v in self.extra.items()},
        }
        if include_trials:
            d["trials"] = [{str(a): v for a, v in t.items()} for t in self.trials]
        return d


def _aggregate(name, trials, alphas):
    methods, paired, extra = {}, {}, {}
    for alpha in alphas:
        rows = [t[alpha] for t in trials]
        if name in ("coverage_sweep", "setsize_vs_avg", "setsize_vs_std"):
            labels = [k for k, v in rows[0].items() if isinstance(v, dict)]
            methods[alpha] = {}
            for label in labels:
                methods[alpha][label] = {}
                for metric in ("coverage", "mean_size", "mean_true_index", "n_empty"):
                    mean, se = _mean_se([r[label][metric] for r in rows])
                    methods[alpha][label][metric] = {"mean": mean, "se": se}
            paired[alpha] = {}
            for a, b in _PAIRS:
                if a in labels and b in labels:
                    mean, se = _mean_se([r[a]["mean_size"] - r[b]["mean_size"] for r in rows])
                    paired[alpha][f"{a} - {b}"] = {"mean": mean, "se": se}
            fracs = [r.get("fraction_above_s_conj") for r in rows]
            if any(f is not None for f in fracs):
                mean, se = _mean_se(fracs)
                extra[alpha] = {"fraction_above_s_conj": {"mean": mean, "se": se}}
        elif name == "zero_variance_reduction":
            fr = [r["identical_fraction"] for r in rows]
            extra[alpha] = {"identical_fraction_min": min(fr), "identical_fraction_mean": float(np.mean(fr))}
        elif name == "instability_demo":
            extra[alpha] = {
                "fraction_unstable": _mean_se([r["fraction_unstable"] for r in rows])[0],
                "mean_distinct_sets": _mean_se([r["mean_distinct_sets"] for r in rows])[0],
                "trials_with_unstable_item": int(sum(r["fraction_unstable"] > 0 for r in rows)),
            }
        elif name == "asymptotic_rejection":
            extra[alpha] = {
                "sigma": list(_SIGMAS),
                "std_mean": np.mean([r["std"] for r in rows], axis=0).tolist(),
                "std_max_dev_from_half_at_largest_sigma": float(
                    max(abs(r["std"][-1] - 0.5) for r in rows)
                ),
                "rvalue_mean": np.mean([r["rvalue"] for r in rows], axis=0).tolist(),
                "rvalue_max_at_largest_sigma": float(max(r["rvalue"][-1] for r in rows)),
            }
    return methods, paired, extra


def _map_trials(fn, jobs, workers):
    # pool.map keeps submission order, so the reduction is order-independent
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def run_experiment(
    name: str,
    spec: GenerativeSpec | None = None,
    alphas: Sequence[float] = (0.1,),
    n_trials: int = 200,
    config: CalibrationConfig | None = None,
    methods: Sequence[MethodSpec] = METHODS,
    workers: int | None = None,
) -> ExperimentResult:
    """Run ``n_trials`` independent simulate/calibrate/predict/evaluate cycles.

    Trial ``i`` draws from ``spec.rng`` shifted by ``i``, so results do not
    depend on worker count or completion order.
    """
    if name not in _TRIALS:
        raise DomainError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    spec = spec or GenerativeSpec()
    config = config or CalibrationConfig()
    alphas = tuple(float(a) for a in alphas)
    fn = _TRIALS[name]
    jobs = [(fn, replace(spec, rng=spec.rng.child(i)), alphas, config, tuple(methods)) for i in range(n_trials)]
    trials = _map_trials(_call_trial, jobs, workers)
    methods_summary, paired, extra = _aggregate(name, trials, alphas)
    echo = {"spec": spec.to_dict(), "calibration": config.to_dict(), "methods": [m.label for m in methods]}
    return ExperimentResult(
        name=name,
        config=echo,
        alphas=alphas,
        n_trials=n_trials,
        methods=methods_summary,
        paired=paired,
        extra=extra,
        trials=tuple(trials),
    )


def _resplit_trial(args):
    pooled, n_cal, rng, alphas, config, methods = args
    perm = rng.generator().permutation(pooled.n_items)
    t_cal, t_test = pooled.subset(perm[:n_cal]), pooled.subset(perm[n_cal:])
    out = {}
    for alpha in alphas:
        runs = run_methods(t_cal, t_test, alpha, methods, config)
        out[alpha] = {
            label: {
                "coverage": rep.coverage,
                "mean_size": rep.mean_size,
                "mean_true_index": rep.mean_true_index,
                "n_empty": rep.n_empty,
            }
            for label, (_, _, rep) in runs.items()
        }
    return out


def compare_on_tensors(
    t_cal: ScoreTensor,
    t_test: ScoreTensor,
    alphas: Sequence[float],
    n_trials: int,
    rng: RngSpec,
    config: CalibrationConfig | None = None,
    methods: Sequence[MethodSpec] = METHODS,
    workers: int | None = None,
) -> ExperimentResult:
    """Compare methods over random re-splits of the pooled labeled items.

    Trial ``i`` permutes the pooled items with ``rng`` shifted by ``i`` and
    keeps the original calibration size.
    """
    if t_cal.n_candidates != t_test.n_candidates or t_cal.n_samples != t_test.n_samples:
        raise DomainError("calibration and test tensors must share K and M")
    config = config or CalibrationConfig()
    alphas = tuple(float(a) for a in alphas)
    labels = np.concatenate([t_cal.true_label, t_test.true_label]) if (
        t_cal.true_label is not None and t_test.true_label is not None
    ) else None
    pooled = ScoreTensor(
        list(t_cal.item_ids) + list(t_test.item_ids),
        np.concatenate([t_cal.scores, t_test.scores]),
        t_cal.score_kind,
        labels,
    )
    jobs = [(pooled, t_cal.n_items, rng.child(i), alphas, config, tuple(methods)) for i in range(n_trials)]
    trials = _map_trials(_resplit_trial, jobs, workers)
    methods_summary, paired, extra = _aggregate("coverage_sweep", trials, alphas)
    echo = {
        "source": "tensors",
        "n_cal": t_cal.n_items,
        "n_test": t_test.n_items,
        "seed": rng.seed,
        "stream_id": rng.stream_id,
        "calibration": config.to_dict(),
        "methods": [m.label for m in methods],
    }
    return ExperimentResult("compare", echo, alphas, n_trials, methods_summary, paired, extra, tuple(trials))
