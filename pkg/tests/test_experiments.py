import sys
import os
import math
import dataclasses
import unittest
from types import SimpleNamespace
from unittest.mock import MagicMock, patch

import pytest

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '../simulation_integration')))
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '../verifier/plugins')))

from errors import ConditionGateError, ConfigError
from estimators import GrowthFit, MomentEstimate
from experiments import (DIAGNOSTIC, FAIL, HORIZON_RAISE_FACTOR, INCONCLUSIVE, MAX_HORIZON_RAISES, PASS, SUITES,
                         ReplicaBudget, SuiteContext, SuiteReport, condition_frame, cycle_coefficient,
                         interval_coefficient, magnitude_growth, run_suite)
from model_core import check_conditions, cycle_drift_constant
from run_config import KNOWN_SUITES, parse_config, tau_horizon


def quick_config(preset="canonical-1d", **extra):
    data = {
        "schema_version": 1,
        "model": {"preset": preset, "M1": 8},
        "engine": {"dt": 0.01, "horizon": 200},
        "estimation": {"replicas": 200, "block_size": 100, "audit_samples": 1000, "sweep_tuples": 1000},
    }
    data.update(extra)
    return parse_config(data)


def estimate(mean, se):
    return MomentEstimate(mean=mean, se=se, ci_lo=mean - 3 * se, ci_hi=mean + 3 * se, n=1000)


class TestSuiteRegistry(unittest.TestCase):
    def test_every_known_suite_has_a_plugin(self):
        self.assertEqual(sorted(SUITES), sorted(KNOWN_SUITES))

    def test_unknown_suite(self):
        with self.assertRaises(ConfigError):
            run_suite("lemma7", quick_config())

    def test_gated_suite_on_boundary_tuple(self):
        with self.assertRaises(ConditionGateError) as ctx:
            run_suite("theorem2", quick_config("boundary-c1"))
        self.assertEqual(ctx.exception.tier, "c2a")
        self.assertEqual(ctx.exception.exit_code, 2)
        self.assertLess(ctx.exception.margins["c2a"], 0)


class TestConditionsSuite(unittest.TestCase):
    def test_canonical_tuple_passes(self):
        reports = run_suite("conditions", quick_config())
        ids = [r.check_id for r in reports]
        self.assertEqual(ids, sorted(ids))
        self.assertIn("conditions.lle-residual", ids)
        self.assertIn("conditions.drift-audit.b2", ids)
        for report in reports:
            self.assertEqual(report.verdict, PASS, report.check_id)
            self.assertEqual(report.seed, 0)

    def test_boundary_tuple_marks_higher_tiers_diagnostic(self):
        reports = {r.check_id: r for r in run_suite("conditions", quick_config("boundary-c1"))}
        self.assertEqual(reports["conditions.c1"].verdict, PASS)
        self.assertEqual(reports["conditions.c2"].verdict, DIAGNOSTIC)
        self.assertFalse(reports["conditions.c2"].gating)
        self.assertLess(reports["conditions.c2a"].margin, 0)

    def test_conditions_do_not_trigger_m1_search(self):
        config = quick_config()
        context = SuiteContext(config)
        run_suite("conditions", config, context)
        self.assertIsNone(context.resolved_m1)

    def test_condition_frame(self):
        frame = condition_frame(SuiteContext(quick_config()))
        self.assertEqual(list(frame.columns), ["condition", "margin", "holds", "tier holds"])
        self.assertIn("epsilon", list(frame["condition"]))
        self.assertTrue(frame["holds"].all())


class TestReportBuilders(unittest.TestCase):
    def setUp(self):
        self.ctx = SuiteContext(quick_config())

    def test_not_above_passes_while_interval_reaches_threshold(self):
        report = self.ctx.not_above("x", "s", "claim", estimate(1.02, 0.01), 1.0)
        self.assertEqual(report.verdict, PASS)
        report = self.ctx.not_above("x", "s", "claim", estimate(1.2, 0.01), 1.0)
        self.assertEqual(report.verdict, FAIL)
        self.assertAlmostEqual(report.margin, 1.0 - 1.17)

    def test_strict_bounds(self):
        self.assertEqual(self.ctx.below("x", "s", "c", estimate(-1.0, 0.1), 0.0).verdict, PASS)
        self.assertEqual(self.ctx.below("x", "s", "c", estimate(-0.1, 0.1), 0.0).verdict, FAIL)
        self.assertEqual(self.ctx.above("x", "s", "c", estimate(1.0, 0.1), 0.0).verdict, PASS)
        self.assertEqual(self.ctx.above("x", "s", "c", estimate(0.2, 0.1), 0.0).verdict, FAIL)

    def test_within(self):
        self.assertEqual(self.ctx.within("x", "s", "c", estimate(1.02, 0.01), 1.0).verdict, PASS)
        self.assertEqual(self.ctx.within("x", "s", "c", estimate(1.05, 0.01), 1.0).verdict, FAIL)
        exact = MomentEstimate.exact(2.0)
        self.assertEqual(self.ctx.within("x", "s", "c", exact, 2.0).verdict, PASS)

    def test_exponent_check_gates_on_upper_end(self):
        fit = GrowthFit(exponent=1.9, intercept=0.0, r2=0.99, radii=[2.0, 4.0, 8.0], exponent_se=0.05)
        report = self.ctx.exponent_at_most("x", "s", "c", fit, 2.3)
        self.assertEqual(report.verdict, PASS)
        self.assertIn("r2=", report.note)
        self.assertAlmostEqual(report.ci_hi, 1.9 + self.ctx.z * 0.05)
        report = self.ctx.exponent_at_most("x", "s", "c", fit, 2.0)
        self.assertEqual(report.verdict, FAIL)
        self.assertLess(report.margin, 0)
        report = self.ctx.exponent_at_most("x", "s", "c", fit, 1.0, diagnostic=True)
        self.assertEqual(report.verdict, DIAGNOSTIC)

    def test_underpowered_straddle_is_inconclusive(self):
        weak = ReplicaBudget(n=400, needed=1e6, powered=False)
        strong = ReplicaBudget(n=400, needed=100.0, powered=True)
        report = self.ctx.below("x", "s", "c", estimate(-0.1, 0.1), 0.0, budget=weak)
        self.assertEqual(report.verdict, INCONCLUSIVE)
        self.assertFalse(report.gating)
        self.assertIn("underpowered", report.note)
        self.assertEqual(self.ctx.below("x", "s", "c", estimate(-0.1, 0.1), 0.0, budget=strong).verdict, FAIL)
        self.assertEqual(self.ctx.below("x", "s", "c", estimate(0.5, 0.1), 0.0, budget=weak).verdict, FAIL)
        self.assertEqual(self.ctx.above("x", "s", "c", estimate(0.2, 0.1), 0.0, budget=weak).verdict, INCONCLUSIVE)
        self.assertEqual(self.ctx.above("x", "s", "c", estimate(1.0, 0.1), 0.0, budget=weak).verdict, PASS)

    def test_coefficient_match(self):
        match = self.ctx.coefficient_match
        self.assertEqual(match("x", "s", "c", -8.8, 0.5, -9.0, 0.15).verdict, PASS)
        self.assertEqual(match("x", "s", "c", -20.0, 0.5, -9.0, 0.15).verdict, FAIL)
        # a wide interval around the wrong sign must not pass
        wrong_sign = match("x", "s", "c", 0.305, 10.7, -9.0, 0.15)
        self.assertEqual(wrong_sign.verdict, INCONCLUSIVE)
        self.assertFalse(wrong_sign.gating)
        wide = match("x", "s", "c", -8.0, 2.0, -9.0, 0.15)
        self.assertEqual(wide.verdict, INCONCLUSIVE)
        self.assertIn("half-width", wide.note)
        self.assertEqual(match("x", "s", "c", -8.8, float("nan"), -9.0, 0.15).verdict, INCONCLUSIVE)

    def test_non_finite_numbers_become_empty(self):
        report = self.ctx.report("x", "s", "c", DIAGNOSTIC, estimate=float("nan"), threshold=float("inf"))
        self.assertIsNone(report.estimate)
        self.assertIsNone(report.threshold)
        self.assertEqual(report.config_hash, self.ctx.config_hash)


class TestReplicaSizing(unittest.TestCase):
    def setUp(self):
        self.ctx = SuiteContext(quick_config())

    def test_scaled_replicas_grow_with_radius_squared(self):
        self.assertEqual(self.ctx.scaled_replicas(2.0), 200)
        self.assertEqual(self.ctx.scaled_replicas(5.0), int(200 * 6.25))
        self.assertEqual(self.ctx.scaled_replicas(10.0), 200 * 25)
        capped = SuiteContext(quick_config(estimation={"replicas": 200, "block_size": 100,
                                                       "max_replica_scale": 16}))
        self.assertEqual(capped.scaled_replicas(10.0), 200 * 16)

    def test_sized_replicas_follow_the_signal_to_noise_ratio(self):
        far = self.ctx.sized_replicas(10.0, 4, -10.0, 1.0)
        expected = ((self.ctx.z + self.ctx.z_power) * 4 * 80.0 / 10.0) ** 2
        self.assertAlmostEqual(far.needed, expected)
        self.assertTrue(far.powered)
        self.assertEqual(far.n, math.ceil(expected))
        self.assertEqual(far.note, "")
        mid = self.ctx.sized_replicas(5.0, 4, -10.0, 1.0)
        self.assertAlmostEqual(mid.needed / far.needed, 0.25)
        self.assertGreaterEqual(mid.n, self.ctx.scaled_replicas(5.0))

    def test_capped_budget_is_underpowered(self):
        with self.assertLogs("experiments", level="WARNING"):
            budget = self.ctx.sized_replicas(10.0, 2, 0.12, 0.1, label="lemma3.sign.p2[r=10M1]")
        self.assertFalse(budget.powered)
        self.assertEqual(budget.n, 200 * 256)
        self.assertIn("underpowered", budget.note)


class TestReturnTimeHorizon(unittest.TestCase):
    def test_pinned_horizon_is_kept(self):
        ctx = SuiteContext(quick_config())
        with patch.object(SuiteContext, "_embedded_hitting") as hitting:
            self.assertEqual(ctx.tau_cfg.horizon, 200.0)
        hitting.assert_not_called()

    def _unpinned(self):
        ctx = SuiteContext(quick_config(engine={"dt": 0.01}))
        far = ctx.est.tau_radius_multipliers[-1]
        start = max(ctx.engine_cfg.horizon, tau_horizon(ctx.params, ctx.epsilon, far * ctx.m1))
        return ctx, far, start

    def test_horizon_starts_from_farthest_radius(self):
        ctx, far, start = self._unpinned()
        with patch.object(SuiteContext, "_embedded_hitting",
                          return_value=SimpleNamespace(censored_fraction=0.0)) as hitting:
            self.assertAlmostEqual(ctx.tau_cfg.horizon, start)
        self.assertGreater(start, ctx.engine_cfg.horizon)
        self.assertEqual(sorted(call.args[:2] for call in hitting.call_args_list), [(far, 0), (far, 1)])

    def test_horizon_raised_while_censored(self):
        ctx, far, start = self._unpinned()
        enough = start * HORIZON_RAISE_FACTOR ** 2

        def fake(mult, z, cfg):
            return SimpleNamespace(censored_fraction=0.01 if cfg.horizon < enough else 0.0)

        with patch.object(SuiteContext, "_embedded_hitting", side_effect=fake) as hitting:
            with self.assertLogs("experiments", level="WARNING") as logs:
                cfg = ctx.tau_cfg
            self.assertAlmostEqual(cfg.horizon, enough)
            self.assertEqual(len(logs.records), 2)
            self.assertEqual(hitting.call_count, 6)
            self.assertEqual(ctx.hitting(far, 1).censored_fraction, 0.0)
            self.assertEqual(hitting.call_count, 6)

    def test_raises_stop_after_the_limit(self):
        ctx, far, start = self._unpinned()
        with patch.object(SuiteContext, "_embedded_hitting",
                          return_value=SimpleNamespace(censored_fraction=0.5)):
            with self.assertLogs("experiments", level="WARNING") as logs:
                cfg = ctx.tau_cfg
        self.assertAlmostEqual(cfg.horizon, start * HORIZON_RAISE_FACTOR ** MAX_HORIZON_RAISES)
        self.assertEqual(len(logs.records), MAX_HORIZON_RAISES + 1)
        self.assertIn("still above", logs.output[-1])


class TestCycleDriftMonotone(unittest.TestCase):
    def _run(self, means):
        ctx = SuiteContext(quick_config())
        sampler = MagicMock()
        sampler.constants.c1 = 1.1
        sampler.estimator.interval_moment_change.return_value = estimate(-5000.0, 10.0)
        sampler.conditional_moment_drift.side_effect = [estimate(m, abs(m) * 0.01) for m in means]
        with patch.object(SuiteContext, "sampler", return_value=sampler):
            return {r.check_id: r for r in run_suite("lemma9", ctx.config, ctx)}

    def test_growing_magnitudes_pass(self):
        reports = self._run([-1000.0, -6000.0, -25000.0])
        self.assertEqual(reports["lemma9.monotone"].verdict, PASS)
        self.assertAlmostEqual(reports["lemma9.monotone"].estimate, 25000.0 / 6000.0)
        self.assertIn("magnitudes=", reports["lemma9.monotone"].note)

    def test_shrinking_magnitude_fails(self):
        reports = self._run([-1000.0, -6000.0, -3000.0])
        self.assertEqual(reports["lemma9.monotone"].verdict, FAIL)
        self.assertLess(reports["lemma9.monotone"].margin, 0)

    def test_positive_drift_fails(self):
        reports = self._run([-1000.0, -6000.0, 25000.0])
        self.assertEqual(reports["lemma9.monotone"].verdict, FAIL)


class TestTargets(unittest.TestCase):
    def setUp(self):
        self.params = SuiteContext(quick_config()).params

    def test_interval_coefficients(self):
        self.assertAlmostEqual(interval_coefficient(self.params, 0, 2), -7.0)
        self.assertAlmostEqual(interval_coefficient(self.params, 1, 2), 0.12)
        self.assertAlmostEqual(interval_coefficient(self.params, 0, 4), -10.0)
        self.assertAlmostEqual(interval_coefficient(self.params, 1, 4), 0.64)
        self.assertAlmostEqual(interval_coefficient(self.params, 0, 6), -9.0)
        self.assertAlmostEqual(interval_coefficient(self.params, 1, 6), 1.56)
        with self.assertRaises(ValueError):
            interval_coefficient(self.params, 0, 3)

    def test_cycle_coefficients(self):
        epsilon = check_conditions(self.params).epsilon
        self.assertAlmostEqual(cycle_coefficient(self.params, epsilon, 1),
                               -cycle_drift_constant(self.params, epsilon))
        self.assertAlmostEqual(cycle_coefficient(self.params, epsilon, 2), -9.36)
        self.assertAlmostEqual(cycle_coefficient(self.params, epsilon, 3), -7.44)

    def test_magnitude_growth(self):
        grid = [estimate(-1.0, 0.1), estimate(-4.0, 0.1), estimate(-9.0, 0.1)]
        self.assertAlmostEqual(magnitude_growth(grid), 2.25)
        grid[2] = estimate(-3.0, 0.1)
        self.assertAlmostEqual(magnitude_growth(grid), 0.75)


def test_suite_report_dict_keys():
    report = SuiteReport(check_id="a", suite="b", claim="c", estimate=1.0, threshold=2.0, margin=1.0,
                         ci_lo=0.5, ci_hi=1.5, verdict=PASS, config_hash="h", seed=3)
    assert list(report.to_dict()) == ["check_id", "suite", "claim", "estimate", "threshold", "margin",
                                      "ci_lo", "ci_hi", "verdict", "config_hash", "seed", "note"]
    assert report.gating
    assert not dataclasses.replace(report, verdict=INCONCLUSIVE).gating


@pytest.mark.parametrize("suite_id", ["conditions", "engine"])
def test_ungated_suites_run_on_boundary_tuple(suite_id):
    assert SUITES[suite_id].requires is None


SMOKE_CHECKS = {
    "engine": "engine.halving.cycle-drift",
    "lemma1": "lemma1.occupation.monotone",
    "lemma2": "lemma3.sign.p2[r=4M1]",
    "lemma50": "lemma50.zero-drift[t=0.5]",
    "lemma5-8": "lemma8.coefficient",
    "lemma9": "lemma9.monotone",
    "lemma5a-8fr": "lemma8fr.coefficient",
    "lemma9a": "lemma9a.cycle-drift[r=3M1]",
    "corollary4": "corollary4.m3.n3[r=2M1]",
    "lemma11": "lemma11.EN-growth.z1",
    "martingale": "martingale.etau2.z0[r=1.5M1]",
    "proposition1": "proposition1.censoring.z1",
    "theorem2": "theorem2.EN2-growth.z0",
    "remark1": "remark1.tau-m1-sq-exponent.z0",
    "remark2": "remark2.tv-slope",
}


@pytest.fixture(scope="module")
def smoke_context():
    config = parse_config({
        "schema_version": 1,
        "model": {"preset": "canonical-1d", "M1": 8},
        "engine": {"dt": 0.02, "horizon": 400},
        "estimation": {"replicas": 100, "block_size": 100, "audit_samples": 500, "sweep_tuples": 500,
                       "max_replica_scale": 2, "radius_multipliers": [2, 3, 4],
                       "tau_radius_multipliers": [1.5, 2, 3], "t_grid": [0.1, 0.5], "reference_time": 2,
                       "bins": 16, "tau_dt": 0.05},
    })
    return SuiteContext(config)


def test_every_suite_has_a_smoke_check():
    assert sorted(SMOKE_CHECKS) == sorted(set(SUITES) - {"conditions"})


@pytest.mark.parametrize("suite_id", sorted(SMOKE_CHECKS))
def test_suite_smoke_run(suite_id, smoke_context):
    reports = run_suite(suite_id, smoke_context.config, smoke_context)
    ids = [r.check_id for r in reports]
    assert ids == sorted(ids)
    assert len(ids) == len(set(ids))
    assert SMOKE_CHECKS[suite_id] in ids
    for report in reports:
        assert report.suite == suite_id
        assert report.verdict in (PASS, FAIL, DIAGNOSTIC, INCONCLUSIVE)
        assert report.config_hash == smoke_context.config_hash
    if suite_id in ("remark1", "remark2"):
        assert all(r.verdict == DIAGNOSTIC for r in reports)
