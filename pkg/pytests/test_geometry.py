import unittest
import math
import numpy as np
from hypothesis import given, settings, strategies as st

import sys; sys.path.append('..'); sys.path.append('.')
from sim.geometry import (Pose2D, OrientedBox, Polyline, normalize_angle, transform_to_global,
                          transform_to_local, sat_overlap, project_onto_polyline, box_corners)

finite = st.floats(min_value=-50, max_value=50, allow_nan=False)
angles = st.floats(min_value=-math.pi, max_value=math.pi, allow_nan=False)
extents = st.floats(min_value=0.2, max_value=4.0, allow_nan=False)


def sampled_overlap(a, b, n=100):
    '''point-sampling oracle: does any sampled point of a lie inside b (or vice versa)'''
    g = np.linspace(-1.0, 1.0, n)
    u, v = np.meshgrid(g, g)
    for box, other in ((a, b), (b, a)):
        local = np.stack([u.ravel()*box.half_length, v.ravel()*box.half_width], axis=1)
        pts = transform_to_global(local, box.center)
        inner = transform_to_local(pts, other.center)
        if np.any((np.abs(inner[:, 0]) <= other.half_length) & (np.abs(inner[:, 1]) <= other.half_width)):
            return True
    return False


class test_transforms(unittest.TestCase):
    def test_identity_pose(self):
        out = transform_to_global([(1.0, 0.0)], Pose2D(0, 0, 0))
        np.testing.assert_allclose(out, [[1.0, 0.0]])

    def test_quarter_rotation(self):
        out = transform_to_global([(1.0, 0.0)], Pose2D(0, 0, math.pi/2))
        np.testing.assert_allclose(out, [[0.0, 1.0]], atol=1e-9)

    def test_distances_preserved(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(-20, 20, size=(30, 2))
        pose = Pose2D(*rng.uniform(-10, 10, size=2), rng.uniform(-3, 3))
        out = transform_to_global(pts, pose)
        before = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        after = np.linalg.norm(out[:, None] - out[None], axis=-1)
        np.testing.assert_allclose(before, after, atol=1e-9)

    @given(finite, finite, angles, finite, finite)
    def test_round_trip(self, x, y, yaw, px, py):
        pose = Pose2D(x, y, yaw)
        back = transform_to_local(transform_to_global([(px, py)], pose), pose)
        np.testing.assert_allclose(back, [[px, py]], atol=1e-9)

    def test_normalize_angle(self):
        self.assertAlmostEqual(normalize_angle(3*math.pi), math.pi)
        self.assertAlmostEqual(normalize_angle(-math.pi), math.pi)
        self.assertAlmostEqual(normalize_angle(0.5), 0.5)


class test_sat(unittest.TestCase):
    def setUp(self):
        self.unit = OrientedBox(Pose2D(0, 0, 0), 0.5, 0.5)

    def test_identical_boxes(self):
        self.assertTrue(sat_overlap(self.unit, self.unit))

    def test_far_apart(self):
        self.assertFalse(sat_overlap(self.unit, self.unit.moved_to(Pose2D(10, 0, 0))))

    def test_touching_edges_overlap(self):
        self.assertTrue(sat_overlap(self.unit, self.unit.moved_to(Pose2D(1.0, 0, 0))))

    def test_bad_extent(self):
        with self.assertRaises(ValueError):
            OrientedBox(Pose2D(0, 0, 0), 0.0, 1.0)

    @given(finite, finite, angles, extents, extents, finite, finite, angles, extents, extents)
    def test_symmetric(self, x1, y1, t1, l1, w1, x2, y2, t2, l2, w2):
        a = OrientedBox(Pose2D(x1, y1, t1), l1, w1)
        b = OrientedBox(Pose2D(x2, y2, t2), l2, w2)
        self.assertEqual(sat_overlap(a, b), sat_overlap(b, a))

    def test_matches_sampling_oracle(self):
        rng = np.random.default_rng(0)
        disagreements = 0
        for _ in range(300):
            a = OrientedBox(Pose2D(0, 0, 0), rng.uniform(0.5, 2), rng.uniform(0.5, 2))
            b = OrientedBox(Pose2D(*rng.uniform(-3, 3, size=2), math.pi/4 + rng.uniform(-0.3, 0.3)),
                            rng.uniform(0.5, 2), rng.uniform(0.5, 2))
            if sat_overlap(a, b) != sampled_overlap(a, b):
                disagreements += 1
        # only grazing pairs may disagree with a finite sample
        self.assertLessEqual(disagreements, 3)

    def test_batched_corners_shape(self):
        corners = box_corners(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros((3, 2)), np.ones((3, 2)), np.ones((3, 2)))
        self.assertEqual(corners.shape, (3, 2, 4, 2))


class test_polyline(unittest.TestCase):
    def setUp(self):
        self.line = Polyline([[0, 0], [10, 0]])
        self.bent = Polyline([[0, 0], [10, 0], [10, 10]])

    def test_on_line(self):
        s, lat, herr = project_onto_polyline((3.0, 0.0), 0.0, self.line)
        self.assertAlmostEqual(s, 3.0)
        self.assertAlmostEqual(lat, 0.0)
        self.assertAlmostEqual(herr, 0.0)

    def test_left_is_positive(self):
        s, lat, herr = project_onto_polyline((5.0, 2.0), 0.0, self.line)
        self.assertAlmostEqual(s, 5.0)
        self.assertAlmostEqual(lat, 2.0)
        self.assertAlmostEqual(herr, 0.0)

    def test_clamps_past_end(self):
        s, _, _ = project_onto_polyline((15.0, 0.5), 0.0, self.line)
        self.assertAlmostEqual(s, self.line.total_length)

    def test_foot_point_has_zero_offset(self):
        rng = np.random.default_rng(1)
        for p in rng.uniform(-2, 12, size=(20, 2)):
            s, _, _ = project_onto_polyline(p, 0.0, self.bent)
            foot = self.bent.point_at(s)
            _, lat, _ = project_onto_polyline(foot, 0.0, self.bent)
            self.assertLess(abs(lat), 1e-9)

    def test_arclength_and_headings(self):
        self.assertAlmostEqual(self.bent.total_length, 20.0)
        np.testing.assert_allclose(self.bent.point_at(15.0), [10.0, 5.0])
        self.assertAlmostEqual(float(self.bent.heading_at(15.0)), math.pi/2)

    def test_window(self):
        window = self.bent.window(5.0, 10.0)
        self.assertAlmostEqual(window.total_length, 10.0)
        np.testing.assert_allclose(window.points[0], [5.0, 0.0])
        np.testing.assert_allclose(window.points[-1], [10.0, 5.0])

    def test_degenerate_polyline(self):
        with self.assertRaises(ValueError):
            Polyline([[0, 0]])
        with self.assertRaises(ValueError):
            Polyline([[0, 0], [0, 0], [1, 0]])


if __name__ == '__main__':
    unittest.main()
