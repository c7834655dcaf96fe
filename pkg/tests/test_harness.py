import math
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

import harness
from config import Config
from exceptions import ConfigError, DomainError
from harness import (
    ClosenessExperiment,
    DeterminismCheck,
    DiffusionExperiment,
    HarnessConfig,
    LabelNoiseLemmaExperiment,
    LrEquivalenceExperiment,
    LsrExperiment,
    MomentExperiment,
    TestFunction,
    TrackingExperiment,
    WeakApproxExperiment,
    acceptance_configs,
    burn_in_rounds,
    equivalence_checks,
    geometry_checks,
    make_experiment,
    max_gap,
    run_acceptance,
    smallest_curvature,
    special_function_checks,
)
from models import ModelSpec


def names(report):
    return {a.name: a for a in report.assertions}


class TestTestFunction:
    def test_parse(self):
        assert TestFunction.parse("y^2").powers == ((1, 2),)
        assert TestFunction.parse("x * y").powers == ((0, 1), (1, 1))
        assert TestFunction.parse("c3^2").powers == ((3, 2),)
        assert TestFunction.parse("1").is_constant

    def test_evaluate(self):
        points = np.array([[2.0, 3.0], [1.0, -1.0]])
        assert_allclose(TestFunction.parse("x*y^2")(points), [18.0, 1.0])
        assert_allclose(TestFunction.parse("1")(points), [1.0, 1.0])

    @pytest.mark.parametrize("text", ["w", "y^0", "y^a", "x+y"])
    def test_rejects(self, text):
        with pytest.raises(ConfigError):
            TestFunction.parse(text)

    def test_missing_coordinate(self):
        with pytest.raises(DomainError):
            TestFunction.parse("z")(np.zeros((1, 2)))


class TestHelpers:
    def test_local_steps_and_rounds(self):
        cfg = HarnessConfig()
        assert cfg.local_steps(0.01) == 50
        assert cfg.local_steps(0.01, 1.0) == 100
        assert cfg.local_steps(2.0) == 1
        assert cfg.r_grp(0.01) == math.floor(1.0 / (0.5 * 0.01**0.25))
        assert cfg.batch == 4
        assert cfg.n_sde_seeds == cfg.seeds

    def test_burn_in(self):
        assert burn_in_rounds(0.5, 2.0, 0.01) == math.ceil(20.0 * math.log(100.0))
        with pytest.raises(DomainError):
            burn_in_rounds(0.5, 0.0, 0.01)

    def test_smallest_curvature(self, valley):
        assert smallest_curvature(valley, [[0.0, 1.0], [0.0, 0.0]]) == pytest.approx(1.0)

    def test_max_gap(self):
        discrete = np.array([[1.0, 1.2, 0.8], [2.0, 2.2, 1.8]])
        sde = np.array([[1.0, 1.0, 1.0], [1.5, 1.5, 1.5]])
        gap, pooled = max_gap(discrete, sde)
        assert gap == pytest.approx(0.5)
        assert pooled == pytest.approx(0.2 / math.sqrt(3))

    def test_unknown_experiment(self):
        with pytest.raises(ConfigError):
            make_experiment(HarnessConfig(experiment="bogus"))


class TestDeterministicChecks:
    def test_special_functions(self):
        report = special_function_checks()
        assert report.passed, report.failures
        assert "F(50)/50" in names(report)

    def test_geometry(self):
        report = geometry_checks()
        assert report.passed, report.failures

    def test_equivalences(self):
        report = equivalence_checks()
        assert report.passed, report.failures
        assert names(report)["zero_noise_equals_gd"].observed == 0.0


small = HarnessConfig(seeds=4, etas=[0.1, 0.05], tracking_time=0.5, horizon=0.05, dt=0.01, records=4)


class TestSmallExperiments:
    async def test_tracking_skips_assertions_with_few_seeds(self):
        report = await TrackingExperiment(small, threads=2).run()
        assert [row["eta"] for row in report.rows] == [0.1, 0.05]
        assert not report.assertions
        assert any("seeds" in notice for notice in report.notices)
        assert report.fits[0].name == "eta_slope"

    async def test_tracking_with_coupled_streams_at_h1(self):
        cfg = replace(small, alpha=0.05, coupled=True, etas=[0.1, 0.05])
        report = await TrackingExperiment(cfg).run()
        # α = η gives H = 1 at η = 0.05, where coupled Local SGD is parallel SGD
        row = [r for r in report.rows if r["eta"] == 0.05][0]
        assert row["H"] == 1
        assert row["median"] == 0.0

    async def test_closeness_reports_both_alpha_ratios(self):
        cfg = replace(small, seeds=Config.MIN_SEEDS, etas=[0.2, 0.1], alpha_eta=0.1, alphas=[0.5, 1.0])
        report = await ClosenessExperiment(cfg).run()
        fits = {f.name for f in report.fits}
        assert {"eta_slope", "alpha_dist_ratio 0.5->1", "alpha_ratio 0.5->1"} <= fits
        checks = names(report)
        assert "closeness_eta_slope" in checks
        assert "closeness_alpha_ratio_0.5->1" in checks
        assert not any(name.startswith("closeness_alpha_dist") for name in checks)
        alpha_rows = [row for row in report.rows if row["scan"] == "alpha"]
        assert [row["H"] for row in alpha_rows] == [5, 10]

    async def test_weak_approx_layout(self):
        report = await WeakApproxExperiment(replace(small, test_functions=["1", "y"])).run()
        gaps = [row for row in report.rows if row["g"] == "1"]
        assert all(row["max_gap"] == 0.0 for row in gaps)
        assert "dt_halving_converges" in names(report)

    async def test_lsr_identities_hold(self):
        report = await LsrExperiment(replace(small, horizon=0.02)).run()
        checks = names(report)
        for name in ("kappa_equals_sgd", "kappa_equals_local_inf", "local_k1_equals_sgd",
                     "local_inf_drift_k_times_sgd", "local_inf_diffusion_equals_sgd",
                     "sgd_lsr_invariance kappa=2", "local_lsr_identity kappa=2", "local_lsr_drift_two kappa=2"):
            assert checks[name].passed, name
        assert any(row["kappa"] == 2.0 for row in report.rows)

    async def test_lsr_inadmissible_kappa_is_noticed(self):
        report = await LsrExperiment(replace(small, kappas=[3.0], horizon=0.02)).run()
        assert any("κ=3" in notice for notice in report.notices)

    async def test_lr_equivalence_on_valley(self):
        report = await LrEquivalenceExperiment(replace(small, horizon=0.5, dt=0.01)).run()
        assert report.passed, report.failures
        assert {"sgd_KT_equals_local_inf_T", "local_inf_closed_form", "local_finite_etaH_oracle",
                "sharpness_decreases"} <= set(names(report))

    async def test_diffusion_defaults_to_block(self):
        experiment = DiffusionExperiment(replace(small, horizon=0.1))
        assert experiment.model.name == "block"
        report = await experiment.run()
        assert len(report.rows) == 4
        assert all(row["expected"] > 0 for row in report.rows)

    async def test_moments_on_block(self):
        cfg = replace(small, model=ModelSpec(name="block"), moment_eta=0.01, moment_seeds=200)
        report = await MomentExperiment(cfg).run()
        checks = names(report)
        assert checks["first_moment_normal"].passed
        assert checks["second_moment_normal"].passed
        assert {"first_moment_tangent_0", "second_moment_tangent_01"} <= set(checks)

    async def test_label_noise_lemma(self):
        report = await LabelNoiseLemmaExperiment(replace(small, noise_samples=50_000)).run()
        assert report.model == "softmax"
        assert report.passed, report.failures

    async def test_determinism_across_threads(self):
        report = await DeterminismCheck(replace(small, seeds=3), threads=3).run()
        assert report.passed


class TestAcceptance:
    def test_suite_layout(self):
        configs = acceptance_configs(HarnessConfig(), "smoke")
        assert len(configs) == 12
        assert [c for c, _ in configs][:3] == ["1 special functions", "2 geometry", "3 algorithm equivalences"]
        experiments = {cfg.experiment for _, cfg in configs}
        assert "moments" in experiments and "determinism" in experiments

    def test_rejects_unknown_scale(self):
        with pytest.raises(ConfigError):
            acceptance_configs(HarnessConfig(), "huge")

    async def test_errors_become_failed_criteria(self, monkeypatch):
        broken = replace(HarnessConfig(), experiment="tracking", theta0=[1.0, 2.0, 3.0])
        monkeypatch.setattr(harness, "acceptance_configs", lambda base, scale: [("0 broken", broken)])
        [(criterion, report)] = await run_acceptance(HarnessConfig(), "smoke")
        assert criterion == "0 broken"
        assert not report.passed
        assert "theta0" in report.assertions[0].tolerance

    @pytest.mark.slow
    async def test_smoke_suite_passes(self):
        results = await run_acceptance(HarnessConfig(), "smoke", threads=4)
        failed = [(c, r.failures) for c, r in results if not r.passed]
        assert not failed

    @pytest.mark.slow
    async def test_full_suite_passes(self):
        results = await run_acceptance(HarnessConfig(seed=Config.MASTER_SEED), "full", threads=8)
        failed = [(c, r.failures) for c, r in results if not r.passed]
        assert not failed
