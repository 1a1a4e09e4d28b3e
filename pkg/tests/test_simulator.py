
import numpy as np
import pytest

from rvcp.conformal import CalibrationConfig, calibrate
from rvcp.core_types import RngSpec
from rvcp.errors import DomainError
from rvcp.simulator import (
    EXPERIMENTS,
    METHODS,
    GenerativeSpec,
    VarianceDist,
    compare_on_tensors,
    generate,
    inclusion_probability,
    run_experiment,
    toy_variance_probability,
    worker_count,
)

SMALL = dict(K=10, M=6, n_cal=120, n_test=80)


class TestVarianceDist:
    @pytest.mark.parametrize(
        "g",
        [
            VarianceDist.point(0.5),
            VarianceDist.two_point(0.1, 4.0, 0.2),
            VarianceDist.lognormal(-1.0, 0.5),
            VarianceDist.uniform(0.2, 3.0),
        ],
    )
    def test_round_trip_and_support(self, g):
        assert VarianceDist.from_dict(g.to_dict()) == g
        draws = g.sample(np.random.default_rng(0), 5000)
        assert np.all(draws >= 0)

    def test_two_point_weight_is_mass_on_first(self):
        draws = VarianceDist.two_point(0.1, 4.0, 0.2).sample(np.random.default_rng(1), 100_000)
        assert abs(np.mean(draws == 0.1) - 0.2) < 0.005

    @pytest.mark.parametrize(
        "kind, params",
        [("point", (-1,)), ("two_point", (1, 2, 1.5)), ("uniform", (2, 1)), ("cauchy", (1,)), ("point", (1, 2))],
    )
    def test_invalid(self, kind, params):
        with pytest.raises(DomainError):
            VarianceDist(kind, params)


class TestGenerate:
    def test_degenerate_prior_and_noise(self):
        spec = GenerativeSpec(mu=1.25, tau2=0.0, g=VarianceDist.point(0.0), **SMALL)
        t_cal, t_test, _ = generate(spec)
        assert np.all(t_cal.scores == 1.25) and np.all(t_test.scores == 1.25)

    def test_seeded_regeneration_is_identical(self):
        a = generate(GenerativeSpec(rng=RngSpec(5), **SMALL))
        b = generate(GenerativeSpec(rng=RngSpec(5), **SMALL))
        assert np.array_equal(a[0].scores, b[0].scores)
        assert np.array_equal(a[1].true_label, b[1].true_label)
        c = generate(GenerativeSpec(rng=RngSpec(6), **SMALL))
        assert not np.array_equal(a[0].scores, c[0].scores)

    def test_total_variance(self):
        spec = GenerativeSpec(g=VarianceDist.point(1.0), K=100, M=1, n_cal=10_000, n_test=0, rng=RngSpec(3))
        t_cal, _, _ = generate(spec)
        assert abs(t_cal.scores.var(ddof=1) / 2.0 - 1.0) <= 0.02

    def test_true_label_is_argmax_theta(self):
        t_cal, t_test, lat = generate(GenerativeSpec(rng=RngSpec(2), **SMALL))
        assert np.array_equal(t_cal.true_label, np.argmax(lat.theta_cal, axis=1))
        assert np.array_equal(t_test.true_label, np.argmax(lat.theta_test, axis=1))
        assert t_cal.item_ids[0] == "cal-000000" and t_test.item_ids[-1] == "test-000079"

    def test_spec_round_trip(self):
        spec = GenerativeSpec(mu=0.5, g=VarianceDist.uniform(0, 2), rng=RngSpec(9, 2), **SMALL)
        assert GenerativeSpec.from_dict(spec.to_dict()) == spec

    def test_spec_rejects_unknown_fields(self):
        with pytest.raises(DomainError):
            GenerativeSpec.from_dict({"K": 5, "bogus": 1})


@pytest.fixture(scope="module")
def preds():
    # many candidates per item keep r* well below 1/2, the regime of the limits
    t_cal, _, _ = generate(GenerativeSpec(K=100, M=20, n_cal=100, n_test=0, rng=RngSpec(4)))
    return calibrate(t_cal, 0.05, "cp"), calibrate(t_cal, 0.05, "cp_rvalue")


class TestInclusion:

    def test_half_at_threshold(self, preds):
        std, _ = preds
        assert inclusion_probability("cp", -std.threshold, 1.0, std) == 0.5

    def test_monotone_in_mu0(self, preds):
        std, _ = preds
        vals = [inclusion_probability("cp", m, 2.0, std) for m in np.linspace(-4, 4, 41)]
        assert np.all(np.diff(vals) > 0)

    def test_large_sigma_limits(self, preds):
        std, rv = preds
        assert abs(inclusion_probability("cp", 0.0, 1e6, std) - 0.5) <= 1e-3
        assert rv.threshold < 0.5
        assert inclusion_probability("cp_rvalue", 0.0, 1e6, rv) < 1e-6

    def test_method_must_match(self, preds):
        std, _ = preds
        with pytest.raises(DomainError):
            inclusion_probability("cp_rvalue", 0.0, 1.0, std)

    def test_nonparametric_unsupported(self):
        t_cal, _, _ = generate(GenerativeSpec(rng=RngSpec(4), **SMALL))
        pred = calibrate(t_cal, 0.1, "cp_rvalue", CalibrationConfig(estimator="nonparametric"))
        with pytest.raises(DomainError):
            inclusion_probability("cp_rvalue", 0.0, 1.0, pred)


def test_toy_probability_small_run():
    res = toy_variance_probability(10**6, RngSpec(0))
    assert res.analytic == pytest.approx(0.4873927396401598, abs=1e-12)
    assert abs(res.monte_carlo - res.analytic) <= 5 * res.mc_standard_error
    assert res.reported_value == 0.4847
    assert res.to_dict()["reported_gap"] == pytest.approx(res.analytic - 0.4847)


class TestExperiments:
    def test_every_name_runs(self):
        spec = GenerativeSpec(rng=RngSpec(11), **SMALL)
        for name in EXPERIMENTS:
            res = run_experiment(name, spec, (0.1,), n_trials=2, workers=1)
            d = res.to_dict()
            assert d["name"] == name and d["n_trials"] == 2

    def test_zero_variance_reduction_is_exact(self):
        res = run_experiment("zero_variance_reduction", GenerativeSpec(rng=RngSpec(1), **SMALL), (0.1, 0.2), 3, workers=1)
        for a in (0.1, 0.2):
            assert res.extra[a]["identical_fraction_min"] == 1.0

    def test_instability_shows_up(self):
        res = run_experiment("instability_demo", GenerativeSpec(rng=RngSpec(1), **SMALL), (0.1,), 1, workers=1)
        assert res.extra[0.1]["fraction_unstable"] > 0

    def test_setsize_reports_paired_differences(self):
        res = run_experiment("setsize_vs_std", GenerativeSpec(rng=RngSpec(2), **SMALL), (0.1,), 4, workers=1)
        assert set(res.methods[0.1]) == {m.label for m in METHODS}
        pair = res.paired[0.1]["cp_rvalue - cp"]
        sizes = [t[0.1]["cp_rvalue"]["mean_size"] - t[0.1]["cp"]["mean_size"] for t in res.trials]
        assert pair["mean"] == pytest.approx(np.mean(sizes))
        assert pair["se"] == pytest.approx(np.std(sizes, ddof=1) / 2)
        for label, m in res.methods[0.1].items():
            assert 0 <= m["coverage"]["mean"] <= 1

    def test_workers_do_not_change_results(self):
        spec = GenerativeSpec(rng=RngSpec(8), **SMALL)
        a = run_experiment("coverage_sweep", spec, (0.1,), 3, workers=1)
        b = run_experiment("coverage_sweep", spec, (0.1,), 3, workers=2)
        assert a.to_dict(include_trials=True) == b.to_dict(include_trials=True)

    def test_unknown_name(self):
        with pytest.raises(DomainError):
            run_experiment("nope", n_trials=1)

    def test_compare_on_tensors_deterministic(self):
        t_cal, t_test, _ = generate(GenerativeSpec(rng=RngSpec(3), **SMALL))
        a = compare_on_tensors(t_cal, t_test, (0.1,), 3, RngSpec(1), workers=1)
        b = compare_on_tensors(t_cal, t_test, (0.1,), 3, RngSpec(1), workers=1)
        assert a.to_dict() == b.to_dict()
        assert "cp_rvalue - cp_avg" in a.paired[0.1]


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("RVCP_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("RVCP_THREADS", "0")
    assert worker_count() >= 1
