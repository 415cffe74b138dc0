import os
import json
import unittest
import tempfile
import runpy
from unittest import mock
import numpy as np

import sys; sys.path.append('..'); sys.path.append('.')
from craftlab import main, parse_overrides, DEFAULT_CONFIG
from policy.vocabulary import VocabConfig
from policy.scorer import PolicyParams, save_checkpoint, load_checkpoint

SMALL_RUN = ['--set', 'trainer.buffer_size=4', '--set', 'trainer.epochs_per_round=1',
             '--set', 'scenarios=["empty_road"]', '--set', 'pretrain.episodes_per_scenario=1']


class test_cli(unittest.TestCase):
    def setUp(self):
        self.dir = tempfile.TemporaryDirectory()
        self.out = self.dir.name
        self.checkpoint = os.path.join(self.out, 'given.pth')
        save_checkpoint(self.checkpoint, PolicyParams(np.array([2.0, 1.0, -1.0, -1.0, 0.5, 1.0, 0.0])),
                        VocabConfig())

    def tearDown(self):
        self.dir.cleanup()

    def test_parse_overrides(self):
        self.assertEqual(parse_overrides(['a.b=3', 'c=["x"]', 'd=craft']), {'a.b': 3, 'c': ['x'], 'd': 'craft'})
        with self.assertRaises(ValueError):
            parse_overrides(['novalue'])

    def test_train_two_rounds(self):
        code = main(['train', '--config', DEFAULT_CONFIG, '--out-dir', self.out, '--rounds', '2', '--seed', '1']
                    + SMALL_RUN)
        self.assertEqual(code, 0)
        for name in ('checkpoint_pretrained.pth', 'checkpoint_round1.pth', 'checkpoint_round2.pth',
                     'metrics.jsonl', 'resolved_config.json'):
            self.assertTrue(os.path.isfile(os.path.join(self.out, name)), name)
        params, _, _, _ = load_checkpoint(os.path.join(self.out, 'checkpoint_round2.pth'))
        self.assertEqual(params.version, 2)
        with open(os.path.join(self.out, 'resolved_config.json'), 'r') as f:
            resolved = json.load(f)
        self.assertEqual(resolved['trainer']['total_rounds'], 2)
        self.assertEqual(resolved['seed'], 1)

    def test_train_module_delegates_to_cli(self):
        script = os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'trainers', 'train_craft.py')
        with mock.patch('craftlab.main', return_value=0) as cli, \
                mock.patch.object(sys, 'argv', ['train_craft.py', '--rounds', '0', '--out-dir', self.out]):
            with self.assertRaises(SystemExit) as exit_status:
                runpy.run_path(script, run_name='__main__')
        self.assertEqual(exit_status.exception.code, 0)
        cli.assert_called_once_with(['train', '--rounds', '0', '--out-dir', self.out])

    def test_train_from_init(self):
        code = main(['train', '--out-dir', self.out, '--rounds', '0', '--init', self.checkpoint] + SMALL_RUN)
        self.assertEqual(code, 0)
        params, _, _, _ = load_checkpoint(os.path.join(self.out, 'checkpoint_pretrained.pth'))
        self.assertEqual(params.weights[0], 2.0)

    def test_eval_zero_episodes(self):
        code = main(['eval', '--checkpoint', self.checkpoint, '--episodes', '0', '--out-dir', self.out])
        self.assertEqual(code, 0)
        with open(os.path.join(self.out, 'eval_report.json'), 'r') as f:
            self.assertEqual(json.load(f)['summary'], [])

    def test_eval_episode(self):
        code = main(['eval', '--checkpoint', self.checkpoint, '--episodes', '1', '--scenario', 'empty_road',
                     '--out-dir', self.out])
        self.assertEqual(code, 0)
        self.assertTrue(os.path.isfile(os.path.join(self.out, 'eval_report.csv')))

    def test_invalid_inputs_exit_2(self):
        self.assertEqual(main(['eval', '--checkpoint', self.checkpoint, '--set', 'trainer.nope=1',
                               '--out-dir', self.out]), 2)
        self.assertEqual(main(['eval', '--checkpoint', self.checkpoint, '--config', 'missing.json',
                               '--out-dir', self.out]), 2)
        self.assertEqual(main(['eval', '--checkpoint', self.checkpoint, '--scenario', 'atlantis',
                               '--out-dir', self.out]), 2)
        self.assertEqual(main(['eval', '--checkpoint', self.checkpoint, '--set', 'vocab.n_points=12',
                               '--out-dir', self.out]), 2)

    def test_snapshot_dist(self):
        code = main(['snapshot-dist', '--checkpoint', self.checkpoint, self.checkpoint, '--scenario', 'empty_road',
                     '--step', '1', '--out-dir', self.out])
        self.assertEqual(code, 0)
        self.assertTrue(os.path.isfile(os.path.join(self.out, 'dist_step1.csv')))
        self.assertEqual(main(['snapshot-dist', '--checkpoint', self.checkpoint, '--scenario', 'empty_road',
                               '--step', '500', '--out-dir', self.out]), 2)

    def test_theory_check(self):
        code = main(['theory-check', '--seeds', '1', '--dual-clip-samples', '1000', '--out-dir', self.out])
        self.assertEqual(code, 0)
        with open(os.path.join(self.out, 'theory_report.json'), 'r') as f:
            rows = json.load(f)
        self.assertEqual(len(rows), 5)
        self.assertTrue(all(row['passed'] for row in rows))


if __name__ == '__main__':
    unittest.main()
