import unittest
import math
import numpy as np
from hypothesis import given, settings, strategies as st

import sys; sys.path.append('..'); sys.path.append('.')
from sim.microworld import InfractionFlags
from counterfactual.rewards import (CounterfactualRewardConfig, CorrectiveRewardConfig, DeviationSample,
                                    progress_term, efficiency_multiplier, recovery_reward,
                                    collision_multiplier, counterfactual_step_reward, corrective_reward,
                                    closed_loop_reward)

NO_DEVIATION = DeviationSample(0.0, 0.0, 0.0)


class test_counterfactual_reward(unittest.TestCase):
    def setUp(self):
        self.cfg = CounterfactualRewardConfig()

    def test_progress_clipped(self):
        self.assertEqual(float(progress_term(0.6, self.cfg)), 0.5)
        self.assertEqual(float(progress_term(5.0, self.cfg)), 1.0)
        self.assertEqual(float(progress_term(-1.0, self.cfg)), 0.0)

    def test_efficiency_multiplier(self):
        self.assertAlmostEqual(float(efficiency_multiplier(DeviationSample(1.0, 0.0, 0.0), self.cfg)),
                               math.exp(-3.0))
        self.assertEqual(float(efficiency_multiplier(NO_DEVIATION, self.cfg)), 1.0)

    def test_recovery_rewards_shrinking_deviation(self):
        shrinking = DeviationSample(0.5, 0.0, 0.0, -0.05, 0.0, 0.0)
        self.assertAlmostEqual(float(recovery_reward(shrinking, 1.0, self.cfg)), 0.02)
        self.assertAlmostEqual(float(recovery_reward(shrinking, 0.0, self.cfg)), 0.01)
        growing = DeviationSample(0.5, 0.0, 0.0, 0.05, 0.0, 0.0)
        self.assertAlmostEqual(float(recovery_reward(growing, 1.0, self.cfg)), -0.02)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(min_value=0, max_value=50), st.floats(min_value=0, max_value=50),
           st.floats(min_value=0, max_value=3.2))
    def test_efficiency_in_range(self, d_g, d_c, d_h):
        eta = float(efficiency_multiplier(DeviationSample(d_g, d_c, d_h), self.cfg))
        self.assertGreaterEqual(eta, self.cfg.eta_min)
        self.assertLessEqual(eta, 1.0)

    def test_recovery_needs_threshold(self):
        small = DeviationSample(0.05, 0.0, 0.0, -0.05, 0.0, 0.0)
        self.assertEqual(float(recovery_reward(small, 1.0, self.cfg)), 0.0)

    def test_collision_multiplier(self):
        self.assertAlmostEqual(float(collision_multiplier(0.0, self.cfg)), 1.0)
        self.assertAlmostEqual(float(collision_multiplier(5.0, self.cfg)), 1.5)
        self.assertAlmostEqual(float(collision_multiplier(20.0, self.cfg)), 1.5)
        with self.assertRaises(ValueError):
            collision_multiplier(-1.0, self.cfg)

    def test_first_collision_only(self):
        flags = InfractionFlags(collision=True, collision_speed=5.0)
        first = counterfactual_step_reward(0.0, 1.0, 0.0, flags, True, 5.0, self.cfg)
        later = counterfactual_step_reward(0.0, 1.0, 0.0, flags, False, 5.0, self.cfg)
        self.assertAlmostEqual(float(first), -60.0)
        self.assertEqual(float(later), 0.0)

    def test_batched(self):
        flags = InfractionFlags(offroad=True)
        r = counterfactual_step_reward(np.ones((2, 3)), np.ones((2, 3)), np.zeros((2, 3)), flags,
                                       np.zeros((2, 3), dtype=bool), np.zeros((2, 3)), self.cfg)
        np.testing.assert_allclose(r, np.full((2, 3), 8.0 - 1.5))

    def test_config_validation(self):
        with self.assertRaises(ValueError):
            CounterfactualRewardConfig(p_max=0.0)
        with self.assertRaises(ValueError):
            CounterfactualRewardConfig(lambda_coll=-1.0)
        with self.assertRaises(ValueError):
            DeviationSample(-0.1, 0.0, 0.0)


class test_closed_loop_reward(unittest.TestCase):
    def setUp(self):
        self.cfg = CounterfactualRewardConfig()

    def test_clean_progress(self):
        self.assertAlmostEqual(closed_loop_reward(1.2, NO_DEVIATION, InfractionFlags(), self.cfg), 8.0)

    def test_red_charged_per_step(self):
        flags = InfractionFlags(red_violation=True)
        self.assertAlmostEqual(closed_loop_reward(0.0, NO_DEVIATION, flags, self.cfg), -40.0)

    def test_lingering_counts_as_stop(self):
        flags = InfractionFlags(go_blocked_slow=True)
        self.assertAlmostEqual(closed_loop_reward(0.0, NO_DEVIATION, flags, self.cfg), -40.0)


class test_corrective_reward(unittest.TestCase):
    def setUp(self):
        self.cfg = CorrectiveRewardConfig()

    def test_clean(self):
        self.assertEqual(corrective_reward(InfractionFlags(), self.cfg), 0.0)

    def test_collision(self):
        self.assertAlmostEqual(corrective_reward(InfractionFlags(collision=True, collision_speed=3.0), self.cfg), -5.0)

    def test_shared_stop_indicator(self):
        both = InfractionFlags(stop_violation=True, go_blocked_slow=True)
        self.assertAlmostEqual(corrective_reward(both, self.cfg), -2.0)

    def test_sum_of_terms(self):
        flags = InfractionFlags(offroad=True, offroute=True, emergency_lane=True, red_violation=True)
        self.assertAlmostEqual(corrective_reward(flags, self.cfg), -(0.5 + 0.5 + 0.2 + 2.0))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.booleans(), min_size=7, max_size=7))
    def test_bounded_for_any_flags(self, bits):
        collision, offroad, offroute, emergency, red, stop, slow = bits
        flags = InfractionFlags(collision=collision, offroad=offroad, offroute=offroute, emergency_lane=emergency,
                                red_violation=red, stop_violation=stop, go_blocked_slow=slow)
        r = corrective_reward(flags, self.cfg)
        self.assertLessEqual(r, 0.0)
        self.assertGreaterEqual(r, -(0.5 + 0.2 + 0.5 + 2.0 + 2.0 + 5.0) - 1e-12)
        self.assertEqual(r == 0.0, not any(bits))

    def test_flag_validation(self):
        with self.assertRaises(ValueError):
            InfractionFlags(collision_speed=1.0)
        with self.assertRaises(ValueError):
            CorrectiveRewardConfig(v_stop=2.0, v_go=1.0)


if __name__ == '__main__':
    unittest.main()
