import sys
import os
import unittest

import numpy as np
import pytest

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '../simulation_integration')))

from errors import ConditionGateError, ConfigError
from model_core import (DriftSpec, ModelParams, RadialDrift, ZeroDrift, canonical_model, check_conditions,
                        condition_margins, cycle_drift_constant, drift_bounds_audit, lle_residual,
                        max_epsilon, occupation_threshold, q_for_epsilon, solve_epsilon_q,
                        sweep_condition_implications)


def make_params(**overrides):
    values = dict(d=1, lambda_minus=1.0, lambda_plus=10.0, r_minus=4.0, r_plus=0.1,
                  R_minus=4.0, R_plus=0.1, M=1.0, M1=4.0)
    values.update(overrides)
    return ModelParams(**values)


class TestModelParams(unittest.TestCase):
    def test_rejects_zero_intensity_with_key_path(self):
        with self.assertRaises(ConfigError) as ctx:
            make_params(lambda_minus=0.0)
        self.assertEqual(ctx.exception.key_path, "model.lambda_minus")
        self.assertIn("(al)", str(ctx.exception))

    def test_rejects_bad_dimension(self):
        for bad in (0, 1.5, True):
            with self.assertRaises(ConfigError):
                make_params(d=bad)

    def test_rejects_inverted_bounds(self):
        with self.assertRaises(ConfigError):
            make_params(R_plus=0.2)
        with self.assertRaises(ConfigError):
            make_params(R_minus=3.0)

    def test_m1_must_exceed_m(self):
        with self.assertRaises(ConfigError) as ctx:
            make_params(M1=1.0)
        self.assertEqual(ctx.exception.key_path, "model.M1")

    def test_with_m1_and_rate(self):
        p = make_params()
        self.assertEqual(p.with_m1(8).M1, 8.0)
        self.assertEqual(p.rate(0), 1.0)
        self.assertEqual(p.rate(1), 10.0)


class TestConditions(unittest.TestCase):
    def test_canonical_tuple_satisfies_every_tier(self):
        report = check_conditions(make_params())
        self.assertTrue(report.holds_c1)
        self.assertTrue(report.holds_c2)
        self.assertTrue(report.holds_c2a)
        # (2*4 - 1)/1 - (0.2 + 1)/10
        self.assertAlmostEqual(report.margins["c1"], 7.0 - 0.12)
        self.assertAlmostEqual(report.margins["c2"], 10.0 - 0.64)
        self.assertAlmostEqual(report.margins["c2a"], 9.0 - 1.56)
        self.assertGreater(report.epsilon, 0)
        self.assertTrue(0 < report.q < 1)

    def test_dimension_clause_of_c1(self):
        report = check_conditions(make_params(r_minus=0.4, R_minus=0.4))
        self.assertFalse(report.holds_c1)
        self.assertLess(report.margins["c1.dimension"], 0)
        self.assertIsNone(report.epsilon)
        self.assertIsNone(report.q)

    def test_boundary_tuple_fails_c2(self):
        report = check_conditions(make_params(r_minus=1.4, R_minus=1.4))
        self.assertTrue(report.holds_c1)
        self.assertFalse(report.holds_c2)
        self.assertFalse(report.holds_c2a)
        self.assertTrue(report.holds(None))
        self.assertFalse(report.holds("c2"))

    def test_margins_are_signed_slack(self):
        margins = condition_margins(make_params())
        self.assertEqual(set(margins), {"c1.dimension", "c1", "c2", "c2a"})
        self.assertAlmostEqual(margins["c1.dimension"], 7.0)

    def test_implication_sweep(self):
        counts = sweep_condition_implications(2000, seed=3)
        self.assertEqual(counts["tuples"], 2000)
        self.assertEqual(counts["c2a_without_c2"], 0)
        self.assertEqual(counts["c2_without_c1"], 0)
        self.assertGreater(counts["c2a"], 0)


class TestEpsilonQ(unittest.TestCase):
    def test_q_for_fixed_epsilon(self):
        q = q_for_epsilon(make_params(), 0.5)
        self.assertAlmostEqual(q, 1.7 / 65.0, places=14)

    def test_solution_satisfies_lle(self):
        params = make_params()
        eps, q = solve_epsilon_q(params, 0.5)
        self.assertAlmostEqual(eps, 0.5 * max_epsilon(params))
        self.assertLessEqual(lle_residual(params, eps, q), 1e-12)
        self.assertTrue(0 < q < 1)

    def test_rejects_c1_failure(self):
        with self.assertRaises(ConditionGateError):
            solve_epsilon_q(make_params(r_minus=0.4, R_minus=0.4))

    def test_rejects_epsilon_out_of_range(self):
        params = make_params()
        with self.assertRaises(ValueError):
            q_for_epsilon(params, max_epsilon(params))
        with self.assertRaises(ValueError):
            solve_epsilon_q(params, 1.0)

    def test_q_reaches_one_at_max_epsilon(self):
        params = make_params()
        eps = max_epsilon(params) * (1 - 1e-9)
        self.assertAlmostEqual(q_for_epsilon(params, eps), 1.0, places=6)

    def test_cycle_constant_positive_under_c1(self):
        params = make_params()
        eps, _ = solve_epsilon_q(params)
        c = cycle_drift_constant(params, eps)
        self.assertGreater(c, 0)
        self.assertAlmostEqual(c, (7.0 - eps) - (1.2 + eps) / 10.0)


class TestCanonicalModel(unittest.TestCase):
    def setUp(self):
        self.params = make_params(d=3, r_minus=6.0, R_minus=6.0)
        self.spec = canonical_model(self.params, 6.0, 0.1)

    def test_outside_ball_inner_products_are_exact(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((500, 3))
        x *= (1.0 + 50.0 * rng.random(500))[:, None] / np.linalg.norm(x, axis=1)[:, None]
        ip_minus = np.einsum("ij,ij->i", x, self.spec.evaluate(x, 0))
        ip_plus = np.einsum("ij,ij->i", x, self.spec.evaluate(x, 1))
        np.testing.assert_allclose(ip_minus, -6.0, rtol=1e-14)
        np.testing.assert_allclose(ip_plus, 0.1, rtol=1e-14)

    def test_one_dimensional_example(self):
        spec = canonical_model(make_params(), 4.0, 0.1)
        b = spec.evaluate(np.array([[2.0]]), 0)
        np.testing.assert_allclose(b, [[-2.0]])

    def test_inside_ball_branch(self):
        x = np.array([[0.5, 0.0, 0.0]])
        ip = float(x[0] @ self.spec.evaluate(x, 0)[0])
        self.assertAlmostEqual(ip, -6.0 / 4.0)
        self.assertEqual(self.spec.norm_bound, 6.0)

    def test_mixed_regimes(self):
        x = np.array([[2.0, 0, 0], [0, 2.0, 0]])
        out = self.spec.evaluate_mixed(x, np.array([0, 1]))
        np.testing.assert_allclose(out[0], self.spec.evaluate(x[:1], 0)[0])
        np.testing.assert_allclose(out[1], self.spec.evaluate(x[1:], 1)[0])

    def test_rejects_non_positive_kappa(self):
        with self.assertRaises(ConfigError):
            canonical_model(self.params, 0.0, 0.1)

    def test_occupation_threshold(self):
        eps = 0.5
        delta = occupation_threshold(self.params, self.spec, eps)
        self.assertAlmostEqual(delta, eps / (2.0 * 6.0 + 12.0))


class TestDriftAudit(unittest.TestCase):
    def test_canonical_family_has_no_violations(self):
        params = make_params()
        audit = drift_bounds_audit(canonical_model(params, 4.0, 0.1), params, 10_000, seed=1)
        self.assertTrue(audit.passed)
        self.assertEqual(audit.n_samples, 10_000)
        self.assertAlmostEqual(audit.second_moment_rate(1), 2 * 4.0 + 1)

    def test_zero_minus_drift_breaks_b_everywhere(self):
        params = make_params()
        spec = DriftSpec(b_minus=ZeroDrift(), b_plus=RadialDrift(0.1, 1.0, 1.0), norm_bound=4.0)
        audit = drift_bounds_audit(spec, params, 200)
        self.assertEqual(audit.violations_b, 200)
        self.assertFalse(audit.holds_b)

    def test_understated_norm_bound_is_flagged(self):
        params = make_params()
        spec = DriftSpec(b_minus=RadialDrift(4.0, -1.0, 1.0), b_plus=RadialDrift(0.1, 1.0, 1.0), norm_bound=1.0)
        audit = drift_bounds_audit(spec, params, 500)
        self.assertGreater(audit.violations_norm, 0)
        self.assertTrue(audit.holds_b)


def test_audit_rejects_empty_sample():
    params = make_params()
    with pytest.raises(ValueError):
        drift_bounds_audit(canonical_model(params, 4.0, 0.1), params, 0)


if __name__ == '__main__':
    unittest.main()
