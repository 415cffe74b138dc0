'''
Run directory helper: checkpoints, per-epoch metrics, reward curves,
snapshot records, resolved config and diagnostic dumps all live under one directory.
'''
import os
import json
import pandas as pd

import sys; sys.path.append('..'); sys.path.append('.')
from policy.scorer import save_checkpoint
from counterfactual.records import save_records
from utils.config import save_run_config

METRICS_FILE = 'metrics.jsonl'
CURVES_FILE = 'curves.csv'
CONFIG_FILE = 'resolved_config.json'


class run_saver:
    def __init__(self, base_dir, run_config, save_name=''):
        self.base_dir = base_dir
        self.run_config = run_config
        self.save_name = save_name
        self.get_save_dir()
        save_run_config(run_config, os.path.join(self.dir, CONFIG_FILE))

    def get_save_dir(self):
        self.dir = os.path.join(self.base_dir, self.save_name) if self.save_name else self.base_dir
        if not os.path.exists(self.dir):
            os.makedirs(self.dir)
        # a fresh run owns its logs
        for name in (METRICS_FILE, CURVES_FILE):
            file = os.path.join(self.dir, name)
            if os.path.isfile(file):
                print('Overwriting previous ' + name + ' in ' + self.dir)
                os.remove(file)

    def checkpoint_path(self, name):
        return os.path.join(self.dir, str(name) + '.pth')

    def save_checkpoint(self, name, params, teacher=None, critic=None):
        path = self.checkpoint_path(name)
        save_checkpoint(path, params, self.run_config.vocab, teacher, critic)
        return path

    def latest_checkpoint(self):
        '''path of the highest checkpoint_round<k>.pth, else the pre-trained one, else None'''
        rounds = []
        for checkpoint in os.listdir(self.dir):
            name, ext = os.path.splitext(checkpoint)
            if ext == '.pth' and name.startswith('checkpoint_round'):
                try:
                    rounds.append(int(name[len('checkpoint_round'):]))
                except ValueError:
                    pass
        if len(rounds) > 0:
            return self.checkpoint_path('checkpoint_round' + str(max(rounds)))
        pretrained = self.checkpoint_path('checkpoint_pretrained')
        return pretrained if os.path.isfile(pretrained) else None

    def records_path(self, round_index):
        return os.path.join(self.dir, 'records_round' + str(round_index) + '.json')

    def save_records(self, round_index, buffer):
        '''write the (snapshot, candidates) groups collected in a round'''
        path = self.records_path(round_index)
        save_records(path, [(t.snapshot, t.candidates) for t in buffer.transitions])
        return path

    def log_training_stats(self, stats_dicts):
        '''append one JSON line per stats dict'''
        if len(stats_dicts) == 0:
            return
        df = pd.DataFrame(stats_dicts)
        text = df.to_json(orient='records', lines=True, double_precision=15)
        if not text.endswith('\n'):
            text += '\n'
        with open(os.path.join(self.dir, METRICS_FILE), 'a') as f:
            f.write(text)

    def log_curve(self, row):
        df = pd.DataFrame([row])
        file = os.path.join(self.dir, CURVES_FILE)
        if os.path.isfile(file):
            df.to_csv(file, mode='a', index=False, header=False)
        else:
            df.to_csv(file, index=False)

    def write_diagnostic(self, round_index, diagnostic):
        file = os.path.join(self.dir, 'diagnostic_round' + str(round_index) + '.json')
        with open(file, 'w') as f:
            json.dump(diagnostic, f, indent=2, default=str)
        return file


def read_metrics(run_dir):
    file = os.path.join(run_dir, METRICS_FILE)
    if not os.path.isfile(file):
        return pd.DataFrame()
    return pd.read_json(file, lines=True)
