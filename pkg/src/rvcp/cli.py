"""Command-line interface: ``rvcp simulate | calibrate | predict | evaluate | compare``.

Exit codes: 0 success, 2 input error, 3 statistical precondition not met.
"""

from __future__ import annotations

import json
import sys
from dataclasses import replace
from functools import wraps

import click

from . import io
from .conformal import CalibrationConfig, calibrate, evaluate, predict
from .core_types import Method, RngSpec
from .errors import InputError, RVCPError
from .simulator import (
    EXPERIMENTS,
    GenerativeSpec,
    compare_on_tensors,
    generate,
    run_experiment,
    toy_variance_probability,
)

METHOD_CHOICES = {"cp": Method.CP, "cp-avg": Method.CP_AVG, "cp-rvalue": Method.CP_RVALUE}
MODE_CHOICES = {"raw": "raw", "standard-error": "standard_error", "zero": "zero"}

DEFAULTS = {
    "method": "cp-rvalue",
    "alpha": 0.1,
    "estimator": "parametric",
    "variance_mode": "standard-error",
    "grid_size": 999,
    "refine": True,
    "sample_index": 0,
    "max_support": 2048,
}


def _fail(exc: Exception, code: int):
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


def handle_errors(fn):
    @wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except RVCPError as exc:
            _fail(exc, exc.exit_code)
        except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            _fail(exc, 2)

    return wrapper


def _read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from None
    if not isinstance(obj, dict):
        raise InputError(f"{path}: expected a JSON object")
    return obj


def effective_config(flags: dict, config_path) -> dict:
    """Merge CLI flags over a config file over built-in defaults."""
    merged = dict(DEFAULTS)
    if config_path:
        file_cfg = {k.replace("-", "_"): v for k, v in _read_json(config_path).items()}
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    merged.update({k: v for k, v in flags.items() if v is not None})
    if merged["method"] not in METHOD_CHOICES:
        raise InputError(f"method must be one of {sorted(METHOD_CHOICES)}")
    if merged["variance_mode"] not in MODE_CHOICES:
        raise InputError(f"variance_mode must be one of {sorted(MODE_CHOICES)}")
    return merged


def calibration_config(cfg: dict) -> CalibrationConfig:
    return CalibrationConfig(
        estimator=cfg["estimator"],
        variance_mode=MODE_CHOICES[cfg["variance_mode"]],
        grid_size=int(cfg["grid_size"]),
        refine=bool(cfg["refine"]),
        sample_index=int(cfg["sample_index"]),
        max_support=None if cfg["max_support"] is None else int(cfg["max_support"]),
    )


def _fmt(v, nd=4):
    if v is None:
        return "-"
    return f"{v:.{nd}f}"


def render_experiment_table(result_dict: dict) -> str:
    lines = []
    for alpha, rows in result_dict["methods"].items():
        lines.append(f"alpha = {alpha}")
        lines.append(f"  {'method':<14}{'coverage':>10}{'+-se':>9}{'size':>10}{'+-se':>9}{'true_idx':>10}")
        for label, m in rows.items():
            lines.append(
                f"  {label:<14}{_fmt(m['coverage']['mean']):>10}{_fmt(m['coverage']['se']):>9}"
                f"{_fmt(m['mean_size']['mean'], 3):>10}{_fmt(m['mean_size']['se'], 3):>9}"
                f"{_fmt(m['mean_true_index']['mean'], 3):>10}"
            )
        for pair, v in result_dict["paired"].get(alpha, {}).items():
            lines.append(f"  paired {pair:<26}{_fmt(v['mean'], 3):>10}  se {_fmt(v['se'], 3)}")
    return "\n".join(lines)


@click.group()
def main():
    """Conformal prediction sets with empirical-Bayes r-values."""


@main.command()
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False), help="GenerativeSpec JSON.")
@click.option("--out-cal", required=True, type=click.Path(dir_okay=False))
@click.option("--out-test", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", required=True, type=click.IntRange(0, 2**64 - 1))
@click.option("--stream-id", default=0, show_default=True, type=click.IntRange(0))
@handle_errors
def simulate(spec_path, out_cal, out_test, seed, stream_id):
    """Write calibration and test tensors drawn from the Normal-Normal model."""
    raw = _read_json(spec_path) if spec_path else {}
    raw.pop("rng", None)
    spec = replace(GenerativeSpec.from_dict(raw), rng=RngSpec(seed, stream_id))
    t_cal, t_test, _ = generate(spec)
    meta = {"generator": spec.to_dict()}
    io.save_tensor(t_cal, out_cal, meta)
    io.save_tensor(t_test, out_test, meta)
    click.echo(f"wrote {t_cal.n_items} calibration and {t_test.n_items} test items (K={spec.K}, M={spec.M})")


@main.command("calibrate")
@click.option("--method", type=click.Choice(sorted(METHOD_CHOICES)))
@click.option("--alpha", type=float)
@click.option("--estimator", type=click.Choice(["parametric", "nonparametric"]))
@click.option("--variance-mode", type=click.Choice(sorted(MODE_CHOICES)))
@click.option("--grid-size", type=click.IntRange(2))
@click.option("--sample-index", type=click.IntRange(0), help="Posterior sample used by cp.")
@click.option("--refine/--no-refine", default=None, help="Refine r-values between grid levels.")
@click.option("--cal", "cal_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@handle_errors
def calibrate_cmd(method, alpha, estimator, variance_mode, grid_size, sample_index, refine, cal_path, out_path, config_path):
    """Fit a conformal predictor on a labeled calibration tensor."""
    cfg = effective_config(
        {
            "method": method,
            "alpha": alpha,
            "estimator": estimator,
            "variance_mode": variance_mode,
            "grid_size": grid_size,
            "sample_index": sample_index,
            "refine": refine,
        },
        config_path,
    )
    t_cal = io.load_tensor(cal_path)
    pred = calibrate(t_cal, float(cfg["alpha"]), METHOD_CHOICES[cfg["method"]], calibration_config(cfg))
    io.save_predictor(pred, out_path, echo=cfg)
    click.echo(f"{pred.method.value}: threshold {pred.threshold!r} (rank {pred.rank} of {pred.n_cal})")


@main.command("predict")
@click.option("--predictor", "pred_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--test", "test_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@handle_errors
def predict_cmd(pred_path, test_path, out_path):
    """Write one prediction set per test item."""
    pred = io.load_predictor(pred_path)
    sets = predict(pred, io.load_tensor(test_path))
    header = {
        "method": pred.method.value,
        "alpha": pred.alpha,
        "threshold": pred.threshold,
        "config": pred.config.to_dict(),
    }
    io.save_sets(sets, out_path, header)
    n_empty = sum(s.size == 0 for s in sets)
    click.echo(f"wrote {len(sets)} prediction sets ({n_empty} empty)")


@main.command("evaluate")
@click.option("--sets", "sets_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--truth", "truth_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@handle_errors
def evaluate_cmd(sets_path, truth_path, out_path):
    """Coverage, set size and true-label position of a prediction-set file."""
    header, sets = io.load_sets(sets_path)
    report = evaluate(sets, io.load_tensor(truth_path))
    echo = {k: v for k, v in header.items() if k not in ("version", "kind")}
    io.save_json(io.report_to_dict(report, echo), out_path)
    s = report.summary()
    click.echo(f"{'items':<18}{s['n_items']}")
    click.echo(f"{'coverage':<18}{_fmt(s['coverage'])}")
    click.echo(f"{'mean size':<18}{_fmt(s['mean_size'], 3)} (sd {_fmt(s['std_size'], 3)})")
    click.echo(f"{'mean true index':<18}{_fmt(s['mean_true_index'], 3)}")
    click.echo(f"{'empty sets':<18}{s['n_empty']}")


@main.command()
@click.option("--cal", "cal_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--test", "test_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False),
              help="Simulate fresh data per trial instead of re-splitting tensors.")
@click.option("--alpha", "alphas", type=float, multiple=True)
@click.option("--trials", type=click.IntRange(1), default=20, show_default=True)
@click.option("--seed", required=True, type=click.IntRange(0, 2**64 - 1))
@click.option("--variance-mode", type=click.Choice(sorted(MODE_CHOICES)))
@click.option("--grid-size", type=click.IntRange(2))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), help="Structured JSON report.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@handle_errors
def compare(cal_path, test_path, spec_path, alphas, trials, seed, variance_mode, grid_size, out_path, config_path):
    """Coverage, set size and paired set-size differences for all methods."""
    cfg = effective_config(
        {"variance_mode": variance_mode, "grid_size": grid_size}, config_path
    )
    alphas = alphas or (float(cfg["alpha"]),)
    ccfg = calibration_config(cfg)
    if spec_path:
        if cal_path or test_path:
            raise InputError("use either --spec or --cal/--test, not both")
        raw = _read_json(spec_path)
        raw.pop("rng", None)
        spec = replace(GenerativeSpec.from_dict(raw), rng=RngSpec(seed))
        result = run_experiment("coverage_sweep", spec, alphas, trials, ccfg)
    else:
        if not (cal_path and test_path):
            raise InputError("compare needs --cal and --test, or --spec")
        result = compare_on_tensors(
            io.load_tensor(cal_path), io.load_tensor(test_path), alphas, trials, RngSpec(seed), ccfg
        )
    d = result.to_dict()
    d["config"]["effective"] = cfg
    if out_path:
        io.save_json(d, out_path)
    click.echo(render_experiment_table(d))


@main.command()
@click.argument("name", type=click.Choice(EXPERIMENTS))
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--alpha", "alphas", type=float, multiple=True)
@click.option("--trials", type=click.IntRange(1), default=200, show_default=True)
@click.option("--seed", required=True, type=click.IntRange(0, 2**64 - 1))
@click.option("--out", "out_path", type=click.Path(dir_okay=False))
@handle_errors
def experiment(name, spec_path, alphas, trials, seed, out_path):
    """Run a packaged simulation experiment."""
    raw = _read_json(spec_path) if spec_path else {}
    raw.pop("rng", None)
    spec = replace(GenerativeSpec.from_dict(raw), rng=RngSpec(seed))
    result = run_experiment(name, spec, alphas or (0.1,), trials)
    d = result.to_dict()
    if out_path:
        io.save_json(d, out_path)
    if d["methods"]:
        click.echo(render_experiment_table(d))
    click.echo(json.dumps(d["extra"], indent=1))


@main.command()
@click.option("--draws", type=click.IntRange(1), default=10**7, show_default=True)
@click.option("--seed", required=True, type=click.IntRange(0, 2**64 - 1))
def toy(draws, seed):
    """P(q > p) for p ~ N(1, 1), q ~ N(0, 1000): exact, Monte Carlo, reported."""
    res = toy_variance_probability(draws, RngSpec(seed))
    click.echo(json.dumps(res.to_dict(), indent=1))


if __name__ == "__main__":
    main()
