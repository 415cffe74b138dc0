import io
import json
import unittest
from unittest import mock
from contextlib import redirect_stdout
from dataclasses import replace
import numpy as np

import sys; sys.path.append('..'); sys.path.append('.')
from theory.tabular import (EnumerableMDP, random_mdp, bandit_mdp, softmax_policy, solve_real_advantage,
                            visitation_measure, monte_carlo_visitation, exact_policy_gradient,
                            finite_difference_gradient, value_equation_gradient)
from theory.checks import (DecompositionCheck, check_exact_decomposition, check_variance_identity,
                           check_kl_proximal, kl_proximal_closed_form, check_dual_clip_bounds, check_bias_bound,
                           aligned_residual_error, engine_embedded_mdp, monte_carlo_variance, failure_instance,
                           run_all_checks)
from trainers.objectives import ObjectiveWeights
from sim.geometry import Polyline
from sim.scenarios import load_scenario
from sim.microworld import AgentSpec, reset, snapshot_for_counterfactual
from policy.vocabulary import VocabConfig, generate_candidates
from counterfactual.records import CandidateSet


class test_tabular(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.mdp = random_mdp(self.rng, n_states=6, n_candidates=3, gamma=0.9)
        self.theta = self.rng.normal(size=(6, 3))

    def test_bandit_advantage(self):
        mdp = bandit_mdp([1.0, 0.0])
        advantage = solve_real_advantage(mdp, softmax_policy(mdp, np.zeros((1, 2))))
        np.testing.assert_allclose(advantage, [[0.5, -0.5]])

    def test_advantage_has_zero_mean(self):
        pi = softmax_policy(self.mdp, self.theta)
        advantage = solve_real_advantage(self.mdp, pi)
        np.testing.assert_allclose(np.sum(pi*advantage, axis=1), 0.0, atol=1e-12)

    def test_visitation(self):
        pi = softmax_policy(self.mdp, self.theta)
        d = visitation_measure(self.mdp, pi)
        self.assertAlmostEqual(float(d.sum()), 1.0)
        self.assertTrue(np.all(d >= 0))
        sampled = monte_carlo_visitation(self.mdp, pi, 20000, np.random.default_rng(1))
        np.testing.assert_allclose(sampled, d, atol=0.03)

    def test_gradient_matches_finite_difference(self):
        np.testing.assert_allclose(exact_policy_gradient(self.mdp, self.theta),
                                   finite_difference_gradient(self.mdp, self.theta), atol=1e-6)

    def test_value_equation_gradient(self):
        direct = value_equation_gradient(self.mdp, self.theta)
        np.testing.assert_allclose(direct, exact_policy_gradient(self.mdp, self.theta), atol=1e-10)
        np.testing.assert_allclose(direct, finite_difference_gradient(self.mdp, self.theta), atol=1e-6)

    def test_validation(self):
        P = np.full((2, 2, 2), 0.5)
        R = np.zeros((2, 2))
        with self.assertRaises(ValueError):
            EnumerableMDP(P*1.1, R, 0.9, np.array([0.5, 0.5]))
        with self.assertRaises(ValueError):
            EnumerableMDP(P, R, 1.0, np.array([0.5, 0.5]))
        with self.assertRaises(ValueError):
            EnumerableMDP(P, R, 0.9, np.array([0.4, 0.4]))
        with self.assertRaises(ValueError):
            random_mdp(self.rng, n_states=201)


class test_checks(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(4)
        self.mdp = random_mdp(self.rng, n_states=8, n_candidates=4, gamma=0.8)
        self.theta = self.rng.normal(size=(8, 4))

    def test_decomposition(self):
        result = check_exact_decomposition(self.mdp, self.theta, self.rng.normal(scale=5.0, size=(8, 4)))
        self.assertLess(result.gap, 1e-10)

    def test_decomposition_detects_a_wrong_advantage(self):
        noise = np.random.default_rng(9)

        def corrupted(mdp, pi):
            return np.where(mdp.mask, 123.0 + noise.normal(size=mdp.R.shape), 0.0)

        with mock.patch('theory.checks.solve_real_advantage', corrupted):
            result = check_exact_decomposition(self.mdp, self.theta, self.rng.normal(size=(8, 4)))
        self.assertGreater(result.gap, 1e-6)

    def test_decomposition_extremes(self):
        pi = softmax_policy(self.mdp, self.theta)
        no_proxy = check_exact_decomposition(self.mdp, self.theta, np.zeros((8, 4)))
        np.testing.assert_allclose(no_proxy.residual_term, no_proxy.lhs, atol=1e-10)
        np.testing.assert_allclose(no_proxy.proxy_term, 0.0, atol=1e-12)
        perfect = check_exact_decomposition(self.mdp, self.theta, solve_real_advantage(self.mdp, pi))
        np.testing.assert_allclose(perfect.residual_term, 0.0, atol=1e-10)
        np.testing.assert_allclose(perfect.proxy_term, perfect.lhs, atol=1e-10)

    def test_variance_identity(self):
        y, c = self.rng.normal(size=5), self.rng.normal(size=5)
        pi = self.rng.dirichlet(np.ones(5))
        result = check_variance_identity(y, c, pi, 0.7)
        self.assertAlmostEqual(result.lhs, result.rhs, places=12)
        at_star = check_variance_identity(y, c, pi, result.alpha_star).lhs
        for alpha in np.linspace(-2, 3, 26):
            self.assertLessEqual(at_star, check_variance_identity(y, c, pi, alpha).lhs + 1e-12)
        with self.assertRaises(ValueError):
            check_variance_identity(y, np.ones(5), pi, 0.7)

    def test_correlated_proxy_reduces_variance(self):
        y = self.rng.normal(size=6)
        c = y + 0.1*self.rng.normal(size=6)
        result = check_variance_identity(y, c, np.full(6, 1/6), 1.0)
        self.assertTrue(result.criterion)
        self.assertTrue(result.reduces)

    def test_kl_proximal(self):
        q, u = np.array([0.2, 0.3, 0.5]), np.array([1.0, 0.0, -1.0])
        result = check_kl_proximal(q, u, 0.5)
        self.assertLess(result.tv_gap, 1e-4)
        self.assertAlmostEqual(float(result.closed_form.sum()), 1.0)
        larger = check_kl_proximal(np.full(5, 0.2), np.linspace(-1, 1, 5), 1.0)
        self.assertLess(larger.tv_gap, 1e-3)
        np.testing.assert_allclose(kl_proximal_closed_form(q, np.zeros(3), 1.0), q)
        with self.assertRaises(ValueError):
            check_kl_proximal(q, u, 0.0)
        with self.assertRaises(ValueError):
            check_kl_proximal(np.array([0.0, 0.5, 0.5]), u, 1.0)

    def test_dual_clip_bounds(self):
        result = check_dual_clip_bounds(ObjectiveWeights(), n_samples=10000)
        self.assertEqual(result.violations, 0)
        self.assertAlmostEqual(result.observed_min, -2.0)
        self.assertAlmostEqual(result.observed_max, 1.2)

    def test_bias_bound(self):
        proxy = self.rng.normal(size=(8, 4))
        result = check_bias_bound(self.mdp, self.theta, proxy, self.rng.normal(size=(8, 4)))
        self.assertLessEqual(result.gap, result.bound + 1e-12)
        pi = softmax_policy(self.mdp, self.theta)
        exact = solve_real_advantage(self.mdp, pi) - proxy
        self.assertLess(check_bias_bound(self.mdp, self.theta, proxy, exact).gap, 1e-10)

    def test_monte_carlo_variance(self):
        pi = softmax_policy(self.mdp, self.theta)
        proxy = solve_real_advantage(self.mdp, pi)
        out = monte_carlo_variance(self.mdp, self.theta, proxy, n_samples=5000, n_batches=10)
        self.assertLess(out['var_proxy_residual'], out['var_plain'])
        self.assertTrue(out['criterion_all_states'])

    def test_bias_bound_tight_for_aligned_error(self):
        bandit = bandit_mdp([1.0, 0.0])
        theta = self.rng.normal(size=(1, 2))
        advantage = solve_real_advantage(bandit, softmax_policy(bandit, theta))
        proxy = np.zeros((1, 2))
        result = check_bias_bound(bandit, theta, proxy, advantage + aligned_residual_error(bandit, theta))
        self.assertGreater(result.gap, 0.0)
        self.assertAlmostEqual(result.bound/result.gap, 1.0, places=10)

        mdp = random_mdp(self.rng, n_states=4, n_candidates=3, gamma=0.7)
        theta = self.rng.normal(size=(4, 3))
        proxy = self.rng.normal(size=(4, 3))
        residual = solve_real_advantage(mdp, softmax_policy(mdp, theta)) - proxy
        result = check_bias_bound(mdp, theta, proxy, residual + aligned_residual_error(mdp, theta))
        self.assertGreaterEqual(result.bound/result.gap, 1.0 - 1e-12)
        self.assertLessEqual(result.bound/result.gap, np.sqrt(8) + 1e-9)

    def test_monte_carlo_variance_engine_embedded(self):
        scenario = load_scenario('empty_road')
        parked = AgentSpec(Polyline([[-10.0, 0.0], [130.0, 0.0]]), 30.0, 0.0, behavior='scripted')
        world = reset(replace(scenario, agents_init=(parked,)), 0)
        snapshot = snapshot_for_counterfactual(world)
        candidates = generate_candidates(world, vocab_config=VocabConfig())
        mdp, proxy = engine_embedded_mdp(snapshot, candidates, n_candidates=8)
        self.assertEqual(mdp.n_states, 2)
        self.assertEqual(int(mdp.mask[1].sum()), 1)
        self.assertAlmostEqual(float(proxy[0].mean()), 0.0, places=10)
        theta = np.zeros(mdp.R.shape)
        out = monte_carlo_variance(mdp, theta, proxy, n_samples=20000, n_batches=20)
        self.assertTrue(out['criterion_all_states'])
        self.assertTrue(out['significant'])
        self.assertGreater(out['mean_difference'], 3*out['standard_error'])
        self.assertLess(out['var_proxy_residual'], out['var_plain'])

        lone = CandidateSet(candidates.trajectories, candidates.logits,
                            np.arange(len(candidates)) == int(np.flatnonzero(candidates.valid_mask)[0]))
        with self.assertRaises(ValueError):
            engine_embedded_mdp(snapshot, lone)

    def test_failure_instance(self):
        instance = failure_instance(self.mdp, self.theta, proxy=np.ones((8, 4)))
        self.assertEqual(set(instance), {'P', 'R', 'gamma', 'mu0', 'mask', 'theta', 'proxy'})
        rebuilt = EnumerableMDP(instance['P'], instance['R'], instance['gamma'], instance['mu0'], instance['mask'])
        np.testing.assert_array_equal(rebuilt.P, self.mdp.P)
        np.testing.assert_array_equal(np.array(instance['theta']), self.theta)

    def test_failures_print_the_full_instance(self):
        broken = DecompositionCheck(np.zeros(1), np.zeros(1), np.zeros(1), 1.0)
        out = io.StringIO()
        with mock.patch('theory.checks.check_exact_decomposition', return_value=broken), redirect_stdout(out):
            table = run_all_checks(n_seeds=1, dual_clip_samples=10, verbose=True)
        self.assertFalse(bool(table['passed'].iloc[0]))
        prefix = 'check exact_decomposition failed on instance: '
        lines = [line for line in out.getvalue().splitlines() if line.startswith(prefix)]
        self.assertEqual(len(lines), 1)
        instance = json.loads(lines[0][len(prefix):])
        for key in ('P', 'R', 'gamma', 'mu0', 'mask', 'theta', 'proxy', 'gap'):
            self.assertIn(key, instance)
        self.assertEqual(instance['gap'], 1.0)
        np.testing.assert_allclose(np.sum(instance['P'], axis=2), 1.0)

    def test_run_all(self):
        table = run_all_checks(n_seeds=2, dual_clip_samples=1000, verbose=False)
        self.assertEqual(list(table['check']), ['exact_decomposition', 'variance_identity', 'kl_proximal',
                                                'dual_clip_bounds', 'bias_bound'])
        self.assertTrue(bool(table['passed'].all()))


if __name__ == '__main__':
    unittest.main()
