import sys
import os
import unittest

import numpy as np
import pytest

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '../simulation_integration')))
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '../verifier/plugins')))

from errors import EstimationError
from model_core import ModelParams, canonical_model, zero_model
from sde_engine import EngineConfig
from estimators import (HalvingResult, MomentEstimate, SwitchingEstimator, TVDecay, bootstrap_interval,
                        ensemble_label, fit_leading_coefficient, growth_exponent, normal_quantile,
                        radial_point, require_replicas)


def make_params(**overrides):
    values = dict(d=1, lambda_minus=1.0, lambda_plus=10.0, r_minus=4.0, r_plus=0.1,
                  R_minus=4.0, R_plus=0.1, M=1.0, M1=2.0)
    values.update(overrides)
    return ModelParams(**values)


def estimate(mean, rel_se=0.01):
    se = abs(mean) * rel_se
    return MomentEstimate(mean=mean, se=se, ci_lo=mean - 3 * se, ci_hi=mean + 3 * se, n=1000)


class TestMomentEstimate(unittest.TestCase):
    def test_exact(self):
        est = MomentEstimate.exact(2.5, n=10)
        self.assertEqual((est.mean, est.se, est.ci_lo, est.ci_hi), (2.5, 0.0, 2.5, 2.5))
        self.assertEqual(est.method, "exact")

    def test_normal_interval(self):
        samples = np.arange(1000, dtype=float)
        est = MomentEstimate.from_samples(samples, 0.99)
        half = normal_quantile(0.99) * samples.std(ddof=1) / np.sqrt(1000)
        self.assertAlmostEqual(est.ci_hi - est.mean, half)
        self.assertTrue(est.ci_lo <= est.mean <= est.ci_hi)

    def test_bootstrap_interval_brackets_mean(self):
        samples = np.random.default_rng(0).exponential(size=2000) ** 2
        est = MomentEstimate.from_samples(samples, 0.99, method="bootstrap", seed=4)
        self.assertEqual(est.method, "bootstrap")
        self.assertTrue(est.ci_lo <= est.mean <= est.ci_hi)
        again = MomentEstimate.from_samples(samples, 0.99, method="bootstrap", seed=4)
        self.assertEqual(est.ci_hi, again.ci_hi)

    def test_non_finite_samples_are_dropped(self):
        est = MomentEstimate.from_samples(np.array([1.0, np.nan, 3.0, np.inf]))
        self.assertEqual(est.n, 2)
        self.assertEqual(est.mean, 2.0)

    def test_empty_and_unknown_method(self):
        with self.assertRaises(EstimationError):
            MomentEstimate.from_samples(np.array([np.nan]))
        with self.assertRaises(ValueError):
            MomentEstimate.from_samples(np.ones(5), method="jackknife")

    def test_to_dict(self):
        self.assertEqual(MomentEstimate.exact(1.0).to_dict()["mean"], 1.0)


class TestHelpers(unittest.TestCase):
    def test_replica_floor(self):
        with self.assertRaises(EstimationError):
            require_replicas(99)
        require_replicas(100)

    def test_normal_quantile(self):
        self.assertAlmostEqual(normal_quantile(0.99), 2.5758293, places=6)
        with self.assertRaises(ValueError):
            normal_quantile(1.0)

    def test_bootstrap_interval_is_ordered(self):
        lo, hi = bootstrap_interval(np.arange(100, dtype=float), 0.9, resamples=500, seed=1)
        self.assertLess(lo, 49.5)
        self.assertGreater(hi, 49.5)

    def test_labels_and_points(self):
        self.assertEqual(ensemble_label("op", [1.5, 0.0], 1, 2), "op|x=(1.5,0)|z=1|2")
        self.assertEqual(ensemble_label("op", [2.0], 0), "op|x=(2)|z=0")
        np.testing.assert_array_equal(radial_point(make_params(d=3), 4.0), [4.0, 0.0, 0.0])


class TestFits(unittest.TestCase):
    def test_exact_power_law(self):
        radii = [2.0, 4.0, 8.0, 16.0]
        fit = growth_exponent([estimate(3.0 * r ** 2) for r in radii], radii)
        self.assertAlmostEqual(fit.exponent, 2.0, places=10)
        self.assertAlmostEqual(fit.r2, 1.0, places=10)
        self.assertGreater(fit.exponent_se, 0)

    def test_growth_fit_rejections(self):
        with self.assertRaises(EstimationError):
            growth_exponent([estimate(1.0), estimate(2.0)], [1.0, 2.0])
        with self.assertRaises(EstimationError):
            growth_exponent([estimate(1.0), estimate(-2.0), estimate(3.0)], [1.0, 2.0, 3.0])
        with self.assertRaises(EstimationError):
            growth_exponent([estimate(1.0)] * 3, [1.0, 1.0, 2.0])

    def test_leading_coefficient_quartic(self):
        radii = [4.0, 10.0, 20.0]
        values = [estimate(2.5 * r ** 2 - 7.0) for r in radii]
        fit = fit_leading_coefficient(radii, values, 4)
        self.assertAlmostEqual(fit.coefficient, 2.5, places=8)
        self.assertAlmostEqual(fit.terms[1], -7.0, places=5)

    def test_leading_coefficient_sextic(self):
        radii = [4.0, 10.0, 20.0]
        values = [estimate(-1.5 * r ** 4 + 3.0 * r ** 2 + 1.0) for r in radii]
        fit = fit_leading_coefficient(radii, values, 6)
        self.assertAlmostEqual(fit.coefficient, -1.5, places=6)
        with self.assertRaises(EstimationError):
            fit_leading_coefficient(radii[:2], values[:2], 6)


class TestResultTypes(unittest.TestCase):
    def test_halving_threshold(self):
        result = HalvingResult(difference=estimate(0.001), fine=MomentEstimate(1.0, 0.01, 0.97, 1.03, 100))
        self.assertTrue(result.within_one_se)
        result = HalvingResult(difference=estimate(0.1), fine=MomentEstimate(1.0, 0.01, 0.97, 1.03, 100))
        self.assertFalse(result.within_one_se)

    def test_tv_undercoverage_flag(self):
        decay = TVDecay(times=[1.0], tv=[0.1], noise_floor=0.01, reference_time=5.0,
                        overflow_fraction=0.05, non_increasing=True, slope=float("nan"))
        self.assertTrue(decay.undercovered)


class TestSwitchingEstimator(unittest.TestCase):
    def setUp(self):
        self.params = make_params()
        self.spec = canonical_model(self.params, 4.0, 0.1)
        self.cfg = EngineConfig(dt=0.01, horizon=500.0, rng_seed=9)
        self.est = SwitchingEstimator(self.params, self.spec, self.cfg, 0.99, block_size=256, workers=1)

    def test_holding_time_means(self):
        for regime, rate in ((0, 1.0), (1, 10.0)):
            mean = self.est.holding_time_mean(np.array([5.0]), regime, 2000)
            self.assertLess(abs(mean.mean - 1.0 / rate), 4 * mean.se)

    def test_zero_drift_second_moment(self):
        brownian = SwitchingEstimator(self.params, zero_model(), self.cfg, 0.99, block_size=512, workers=1)
        grid = [0.0, 0.5, 1.0]
        profile = brownian.moment_profile(np.array([3.0]), 0, grid, 2, 4000)
        self.assertEqual(profile[0].method, "exact")
        self.assertEqual(profile[0].mean, 9.0)
        for t, m in zip(grid[1:], profile[1:]):
            self.assertLess(abs(m.mean - (9.0 + t)), 4 * m.se)

    def test_profile_rejects_times_beyond_horizon(self):
        with self.assertRaises(ValueError):
            self.est.moment_profile(np.array([3.0]), 0, [1000.0], 2, 200)
        with self.assertRaises(ValueError):
            self.est.moment_profile(np.array([3.0]), 0, [1.0], 3, 200)

    def test_interval_change_needs_point_outside_m1(self):
        with self.assertRaises(ValueError):
            self.est.interval_moment_change(np.array([1.5]), 0, 2, 200)

    def test_negative_interval_drift(self):
        change = self.est.interval_moment_change(np.array([10.0]), 0, 2, 2000)
        # E[|X_T1|^2 - |x|^2] = (d - 2 kappa_-)/lambda_- = -7 while the path stays outside M
        self.assertLess(abs(change.mean + 7.0), 4 * change.se + 0.1)

    def test_frozen_regime_identity(self):
        frozen = self.est.frozen_regime_moment(np.array([10.0]), 0, 0.1, 2, 4000)
        self.assertLess(abs(frozen.mean - (100.0 - 0.7)), 4 * frozen.se)

    def test_occupation(self):
        self.assertEqual(self.est.occupation_near_ball(np.array([5.0]), 0, "T0", 200).method, "exact")
        with self.assertRaises(ValueError):
            self.est.occupation_near_ball(np.array([5.0]), 0, "T3", 200)
        far = self.est.occupation_near_ball(np.array([50.0]), 0, "T1", 400)
        self.assertEqual(far.mean, 0.0)
        near = self.est.occupation_near_ball(np.array([1.05]), 0, "T1", 400)
        self.assertGreater(near.mean, 0.0)

    def test_hitting_moments(self):
        inside = self.est.hitting_moments(np.array([1.0]), 0, 200)
        self.assertEqual(inside.tau.mean, 0.0)
        moments = self.est.hitting_moments(np.array([4.0]), 1, 400, keep_outcome=True)
        self.assertEqual(moments.dominance_violations, 0)
        self.assertEqual(moments.censored_fraction, 0.0)
        self.assertLessEqual(moments.tau_m1.mean, moments.tau.mean)
        self.assertGreaterEqual(moments.tau_sq.mean, moments.tau.mean ** 2)
        self.assertTrue(moments.second_moments_reliable)
        self.assertEqual(moments.tau_sq.method, "bootstrap")
        self.assertEqual(moments.outcome.n, 400)

    def test_censored_hitting_is_a_lower_bound(self):
        short = self.est.with_config(EngineConfig(dt=0.01, horizon=0.5, rng_seed=9))
        moments = short.hitting_moments(np.array([40.0]), 0, 200)
        self.assertEqual(moments.censored_fraction, 1.0)
        self.assertTrue(moments.tau.lower_bound)
        self.assertFalse(moments.tau_sq.reliable)

    def test_halving_zero_drift(self):
        brownian = SwitchingEstimator(self.params, zero_model(), self.cfg, 0.99, block_size=256, workers=1)
        result = brownian.halving_difference(np.array([3.0]), 0, 300, 1.0)
        self.assertLess(abs(result.difference.mean), 1e-9)
        self.assertTrue(result.within_one_se)

    def test_halving_at_first_switch(self):
        brownian = SwitchingEstimator(self.params, zero_model(), self.cfg, 0.99, block_size=256, workers=1)
        result = brownian.halving_difference(np.array([3.0]), 0, 300, 50.0, max_jumps=1)
        self.assertLess(abs(result.difference.mean), 1e-9)
        self.assertGreater(result.fine.n, 290)

    def test_halving_hitting_powers(self):
        first = self.est.halving_difference(np.array([4.0]), 1, 300, 50.0, power=1, radius=self.params.M1)
        second = self.est.halving_difference(np.array([4.0]), 1, 300, 50.0, power=2, radius=self.params.M1)
        self.assertGreater(first.fine.mean, 0.0)
        self.assertGreaterEqual(second.fine.mean, first.fine.mean ** 2 * 0.99)

    def test_tv_decay(self):
        decay = self.est.tv_decay(np.array([3.0]), 0, [0.1, 1.0], 4.0, 1000, bins=16)
        self.assertEqual(decay.times, [0.1, 1.0])
        self.assertTrue(all(0.0 <= v <= 1.0 for v in decay.tv))
        self.assertGreaterEqual(decay.noise_floor, 0.0)
        self.assertGreater(decay.tv[0], decay.noise_floor)
        with self.assertRaises(ValueError):
            self.est.tv_decay(np.array([3.0]), 0, [1.0, 5.0], 4.0, 1000)


@pytest.mark.parametrize("power", [2, 4, 6])
def test_profile_at_time_zero_is_exact(power):
    params = make_params()
    est = SwitchingEstimator(params, canonical_model(params, 4.0, 0.1), EngineConfig(dt=0.01, horizon=10.0))
    value = est.moment_at_time(np.array([3.0]), 1, 0.0, power, 200)
    assert value.mean == 3.0 ** power
    assert value.se == 0.0


if __name__ == '__main__':
    unittest.main()
