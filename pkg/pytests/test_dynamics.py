import unittest
import math
import numpy as np

import sys; sys.path.append('..'); sys.path.append('.')
from sim.geometry import Pose2D, OrientedBox
from sim.dynamics import (BicycleState, ControlInput, PidGains, PidMemory, TrackReference, DecayAgentState,
                          DecayParams, bicycle_step, pid_track, track_trajectory, decay_rollout_step,
                          decay_accel, STEER_MAX)


class test_bicycle(unittest.TestCase):
    def setUp(self):
        self.state = BicycleState(Pose2D(0, 0, 0), 10.0)

    def test_stationary_fixed_point(self):
        still = BicycleState(Pose2D(1, 2, 0.3), 0.0)
        out = bicycle_step(still, ControlInput(0.4, 0.0), 0.1)
        self.assertEqual((out.pose.x, out.pose.y, out.speed), (1.0, 2.0, 0.0))
        self.assertAlmostEqual(out.pose.yaw, still.pose.yaw, places=12)

    def test_straight_line(self):
        out = bicycle_step(self.state, ControlInput(0.0, 0.0), 0.1)
        self.assertAlmostEqual(out.pose.x, 1.0)
        self.assertAlmostEqual(out.pose.y, 0.0)

    def test_turning_radius(self):
        steer, dt = 0.2, 0.01
        state = BicycleState(Pose2D(0, 0, 0), 5.0)
        xs, ys = [], []
        for _ in range(2000):
            state = bicycle_step(state, ControlInput(steer, 0.0), dt)
            xs.append(state.pose.x)
            ys.append(state.pose.y)
        radius = state.wheelbase / math.tan(steer)
        # circle centred at (0, R) for a left turn from the origin
        r = np.hypot(np.array(xs), np.array(ys) - radius)
        self.assertLess(np.max(np.abs(r - radius))/radius, 0.02)

    def test_no_negative_speed(self):
        out = bicycle_step(BicycleState(Pose2D(0, 0, 0), 0.1), ControlInput(0.0, -6.0), 0.1)
        self.assertEqual(out.speed, 0.0)

    def test_deterministic(self):
        u = ControlInput(0.1, 1.0)
        self.assertEqual(bicycle_step(self.state, u, 0.1), bicycle_step(self.state, u, 0.1))

    def test_control_bounds(self):
        with self.assertRaises(ValueError):
            ControlInput(STEER_MAX + 0.1, 0.0)
        with self.assertRaises(ValueError):
            ControlInput(0.0, 4.0)
        self.assertEqual(ControlInput.saturated(2.0, -10.0), ControlInput(STEER_MAX, -6.0))


class test_pid(unittest.TestCase):
    def setUp(self):
        xs = np.linspace(0, 60, 61)
        self.reference = TrackReference(np.stack([xs, np.zeros_like(xs)], axis=1), np.full(61, 5.0))
        self.gains = PidGains()

    def test_on_reference(self):
        u, memory = pid_track(BicycleState(Pose2D(0, 0, 0), 5.0), self.reference, self.gains, PidMemory(), 0.1)
        self.assertAlmostEqual(u.steer, 0.0)
        self.assertAlmostEqual(u.accel, 0.0)
        self.assertTrue(memory.started)

    def test_steers_back_toward_reference(self):
        u, _ = pid_track(BicycleState(Pose2D(0, 1.0, 0), 5.0), self.reference, self.gains, PidMemory(), 0.1)
        self.assertLess(u.steer, 0.0)

    def test_contraction(self):
        states = track_trajectory(BicycleState(Pose2D(0, 2.0, 0), 5.0), self.reference, 20, 0.1, self.gains)
        self.assertLess(abs(states[-1].pose.y), 2.0)

    def test_hold_pose(self):
        initial = BicycleState(Pose2D(3, 4, 0.2), 0.0)
        states = track_trajectory(initial, np.array([[3.0, 4.0, 0.0]]), 20)
        for s in states:
            self.assertAlmostEqual(s.pose.x, 3.0)
            self.assertAlmostEqual(s.pose.y, 4.0)
            self.assertAlmostEqual(s.speed, 0.0)

    def test_straight_endpoint(self):
        xs = np.linspace(0, 10, 21)
        traj = np.stack([xs, np.zeros_like(xs), np.full(21, 5.0)], axis=1)
        states = track_trajectory(BicycleState(Pose2D(0, 0, 0), 5.0), traj, 20)
        self.assertEqual(len(states), 21)
        self.assertLess(abs(states[-1].pose.x - 10.0), 0.5)
        self.assertLess(abs(states[-1].pose.y), 0.5)

    def test_first_state_is_initial(self):
        initial = BicycleState(Pose2D(0, 0.5, 0), 3.0)
        states = track_trajectory(initial, self.reference, 7)
        self.assertEqual(len(states), 8)
        self.assertEqual(states[0], initial)

    def test_degenerate_candidate(self):
        with self.assertRaises(ValueError):
            track_trajectory(BicycleState(Pose2D(0, 0, 0), 1.0), np.zeros((0, 3)), 5)


class test_decay(unittest.TestCase):
    def setUp(self):
        self.agent = DecayAgentState(OrientedBox(Pose2D(0, 0, 0), 2.0, 1.0), 8.0, 1.0, 0.0)
        self.params = DecayParams()

    def test_hold_regime(self):
        self.assertEqual(float(decay_accel(1.5, 0, False, self.params)), 1.5)

    def test_terminal_regime(self):
        self.assertEqual(float(decay_accel(1.5, 100, False, self.params)), self.params.full_brake)
        agent = self.agent
        for _ in range(40):
            before = agent.speed
            agent = decay_rollout_step(agent, 0.1)
            if agent.step_index > 20:
                self.assertLessEqual(agent.speed, before)
        self.assertGreaterEqual(agent.speed, 0.0)

    def test_connector_brakes_sooner(self):
        def steps_to_full(on_connector):
            for k in range(100):
                if float(decay_accel(1.0, k, on_connector, self.params)) <= self.params.full_brake:
                    return k
        self.assertLess(steps_to_full(True), steps_to_full(False))

    def test_hard_held_braking_settles_at_full_brake(self):
        self.assertEqual(float(decay_accel(-6.0, 100, False, self.params)), self.params.full_brake)
        self.assertEqual(float(decay_accel(-6.0, 100, True, self.params)), self.params.full_brake)
        self.assertEqual(float(decay_accel(-6.0, 4, False, self.params)), -6.0)
        # halfway through the ramp the held value and full_brake are blended equally
        self.assertAlmostEqual(float(decay_accel(-6.0, 9, False, self.params)), -5.0)
        np.testing.assert_array_equal(decay_accel(np.array([-6.0, -1.0, 2.0]), np.full(3, 50),
                                                  np.array([False, True, False]), self.params),
                                      np.full(3, self.params.full_brake))

    def test_monotone_after_window(self):
        accels = [float(decay_accel(2.0, k, False, self.params)) for k in range(5, 30)]
        self.assertTrue(all(b <= a for a, b in zip(accels, accels[1:])))


if __name__ == '__main__':
    unittest.main()
