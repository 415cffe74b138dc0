import os
import unittest
import tempfile
import numpy as np
from hypothesis import given, settings, strategies as st

import sys; sys.path.append('..'); sys.path.append('.')
from sim.scenarios import load_scenario
from sim.microworld import reset, snapshot_for_counterfactual
from policy.vocabulary import VocabConfig, generate_candidates, mode_table
from policy.features import candidate_features, N_FEATURES
from policy.scorer import (PolicyParams, TeacherParams, masked_log_softmax, policy_distribution,
                           sample_candidate, greedy_candidate, logprob_grad, ema_update, save_checkpoint,
                           load_checkpoint)
from policy.pretrain import PretrainConfig, expert_choice, pretrain_policy


class test_vocabulary(unittest.TestCase):
    def setUp(self):
        self.cfg = VocabConfig()
        self.world = reset(load_scenario('empty_road'), 0)

    def test_mode_order(self):
        table = mode_table(self.cfg)
        self.assertEqual(len(table), 25)
        self.assertEqual(table[0], (0, -3.0, 0.0))
        self.assertEqual(table[1], (1, -3.0, 2.0))
        self.assertEqual(table[14], (14, 0.0, 11.0))

    def test_group_shape_and_padding(self):
        candidates = generate_candidates(self.world, vocab_config=self.cfg)
        self.assertEqual(candidates.trajectories.shape, (25, 16, 3))
        padded = generate_candidates(self.world, G=30, vocab_config=self.cfg)
        self.assertEqual(len(padded), 30)
        self.assertFalse(np.any(padded.valid_mask[25:]))
        self.assertEqual(len(generate_candidates(self.world, G=4, vocab_config=self.cfg)), 4)
        with self.assertRaises(ValueError):
            generate_candidates(self.world, G=1, vocab_config=self.cfg)

    def test_offmap_modes_invalid(self):
        candidates = generate_candidates(self.world, vocab_config=self.cfg)
        # the -3 m offset leaves the ego lane on the side with no strip
        self.assertFalse(np.any(candidates.valid_mask[:5]))
        self.assertTrue(candidates.valid_mask[12])

    def test_speed_ramps(self):
        candidates = generate_candidates(self.world, vocab_config=self.cfg)
        speeds = candidates.trajectories[14, :, 2]
        self.assertTrue(np.all(np.diff(speeds) >= 0))
        self.assertAlmostEqual(speeds[-1], 11.0)
        self.assertAlmostEqual(candidates.trajectories[10, -1, 2], 0.0)

    def test_hash_depends_on_config(self):
        self.assertEqual(VocabConfig().hash(), VocabConfig().hash())
        self.assertNotEqual(VocabConfig().hash(), VocabConfig(n_points=12).hash())


class test_features(unittest.TestCase):
    def test_shape_and_invalid_rows(self):
        world = reset(load_scenario('straight_follow'), 0)
        candidates = generate_candidates(world)
        features = candidate_features(snapshot_for_counterfactual(world), candidates)
        self.assertEqual(features.shape, (25, N_FEATURES))
        self.assertTrue(np.all(np.isfinite(features)))
        np.testing.assert_array_equal(features[~candidates.valid_mask], 0.0)
        np.testing.assert_array_equal(features[candidates.valid_mask, -1], 1.0)

    def test_faster_modes_progress_further(self):
        world = reset(load_scenario('empty_road'), 0)
        features = candidate_features(snapshot_for_counterfactual(world), generate_candidates(world))
        self.assertLess(features[10, 0], features[12, 0])
        self.assertLess(features[12, 0], features[14, 0])


class test_scorer(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(0)
        self.features = rng.normal(size=(6, 4))
        self.mask = np.array([True, True, False, True, True, False])
        self.params = PolicyParams(rng.normal(size=4))

    def test_masked_softmax(self):
        dist = policy_distribution(self.params, self.features, self.mask)
        self.assertAlmostEqual(float(dist.probabilities.sum()), 1.0)
        np.testing.assert_array_equal(dist.probabilities[~self.mask], 0.0)
        self.assertTrue(np.all(np.isneginf(dist.log_probabilities[~self.mask])))

    def test_all_masked(self):
        with self.assertRaises(ValueError):
            masked_log_softmax(np.zeros(3), np.zeros(3, dtype=bool))

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(min_value=-30, max_value=30), min_size=6, max_size=6))
    def test_shift_invariance(self, logits):
        logits = np.array(logits)
        np.testing.assert_allclose(masked_log_softmax(logits, self.mask)[self.mask],
                                   masked_log_softmax(logits + 7.0, self.mask)[self.mask], atol=1e-9)

    def test_sampling_never_picks_invalid(self):
        dist = policy_distribution(self.params, self.features, self.mask)
        rng = np.random.default_rng(1)
        for _ in range(200):
            index, logp = sample_candidate(dist, rng)
            self.assertTrue(self.mask[index])
            self.assertEqual(logp, dist.log_probabilities[index])
        self.assertTrue(self.mask[greedy_candidate(dist)])

    def test_logprob_grad_matches_finite_difference(self):
        eps = 1e-6
        grad = logprob_grad(self.params, self.features, self.mask, 3)
        numeric = np.zeros(4)
        for i in range(4):
            step = np.zeros(4)
            step[i] = eps
            up = policy_distribution(self.params.weights + step, self.features, self.mask).log_probabilities[3]
            down = policy_distribution(self.params.weights - step, self.features, self.mask).log_probabilities[3]
            numeric[i] = (up - down) / (2*eps)
        np.testing.assert_allclose(grad, numeric, atol=1e-7)
        with self.assertRaises(ValueError):
            logprob_grad(self.params, self.features, self.mask, 2)

    def test_ema(self):
        teacher = TeacherParams(np.zeros(4))
        online = PolicyParams(np.ones(4))
        np.testing.assert_allclose(ema_update(teacher, online, 0.99).weights, np.full(4, 0.01))
        np.testing.assert_allclose(ema_update(teacher, online, 0.0).weights, np.ones(4))
        with self.assertRaises(ValueError):
            ema_update(teacher, online, 1.0)

    def test_non_finite_weights(self):
        with self.assertRaises(ValueError):
            PolicyParams(np.array([1.0, np.nan]))


class test_checkpoints(unittest.TestCase):
    def setUp(self):
        self.dir = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.dir.name, 'checkpoint.pth')
        self.vocab = VocabConfig()

    def tearDown(self):
        self.dir.cleanup()

    def test_save_load(self):
        params = PolicyParams(np.arange(7, dtype=float), 3)
        teacher = TeacherParams(np.ones(7))
        save_checkpoint(self.path, params, self.vocab, teacher)
        loaded, loaded_teacher, critic, vocab_hash = load_checkpoint(self.path, self.vocab)
        self.assertEqual(loaded, params)
        self.assertEqual(loaded_teacher, teacher)
        self.assertIsNone(critic)
        self.assertEqual(vocab_hash, self.vocab.hash())

    def test_vocab_mismatch(self):
        save_checkpoint(self.path, PolicyParams(np.zeros(7)), self.vocab)
        with self.assertRaises(ValueError):
            load_checkpoint(self.path, VocabConfig(speed_targets=(0.0, 4.0, 8.0)))


class test_pretrain(unittest.TestCase):
    def test_expert_picks_valid_cruise_mode(self):
        world = reset(load_scenario('empty_road'), 0)
        candidates = generate_candidates(world)
        index = expert_choice(world, candidates)
        self.assertTrue(candidates.valid_mask[index])
        _, offset, speed = mode_table(VocabConfig())[index]
        self.assertEqual((offset, speed), (0.0, 8.0))

    def test_pretrain_fits_expert(self):
        params, stats = pretrain_policy([load_scenario('empty_road')], VocabConfig(), None,
                                        PretrainConfig(episodes_per_scenario=1), seed=0)
        self.assertEqual(params.version, 0)
        self.assertGreater(stats['bc_samples'], 0)
        self.assertGreater(stats['bc_accuracy'], 0.5)


if __name__ == '__main__':
    unittest.main()
