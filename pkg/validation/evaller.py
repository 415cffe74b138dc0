'''
Closed-loop evaluation of a scorer checkpoint with greedy selection.

Desk-scale driving metrics per episode:
    route completion   final route progress over route length, in [0, 1]
    infraction score   product of penalty factors, one factor per infraction
                       event (a flag switching on), in [0, 1]
    driving score      route completion x infraction score
    success            the route was completed (collisions and offroute
                       persistence end the episode early)
The penalty factors are local conventions of this micro-world.
'''
import os
import json
from argparse import ArgumentParser

import numpy as np
import pandas as pd
from tqdm import tqdm

import sys; sys.path.append('..'); sys.path.append('.')
from sim.dynamics import PidGains
from sim.microworld import reset, follow_trajectory, snapshot_for_counterfactual
from sim.scenarios import load_scenarios
from policy.vocabulary import VocabConfig, generate_candidates
from policy.features import candidate_features
from policy.scorer import policy_distribution, greedy_candidate, load_checkpoint
from utils.config import load_run_config

PENALTY_FACTORS = {'collision': 0.5, 'red_violation': 0.7, 'stop_violation': 0.8, 'offroad': 0.85}
EVENT_COUNTS = {'collision': 'collisions', 'red_violation': 'red_violations',
                'stop_violation': 'stop_violations', 'offroad': 'offroad_events'}
SUMMARY_COLUMNS = ('scenario', 'episodes', 'success_rate', 'route_completion', 'infraction_score',
                   'driving_score', 'collisions_per_episode', 'collisions', 'red_violations',
                   'stop_violations', 'offroad_events')


class evaller():
    def __init__(self, params, scenarios, episodes=10, seed=1000, vocab_config=None, world_config=None,
                 decision_interval=5, gains=None, chooser=None):
        '''
        chooser(state, candidates) -> index replaces greedy selection when given
        '''
        self.params = params
        self.scenarios = scenarios
        self.episodes = episodes
        self.seed = seed
        self.vocab_config = VocabConfig() if vocab_config is None else vocab_config
        self.world_config = world_config
        self.decision_interval = decision_interval
        self.gains = PidGains() if gains is None else gains
        self.chooser = chooser

    def episode_seed(self, scenario_index, episode):
        return int(np.random.SeedSequence([self.seed, scenario_index, episode]).generate_state(1)[0])

    def choose(self, state, candidates):
        if self.chooser is not None:
            return self.chooser(state, candidates)
        snapshot = snapshot_for_counterfactual(state, candidates)
        features = candidate_features(snapshot, candidates, self.vocab_config)
        return greedy_candidate(policy_distribution(self.params, features, candidates.valid_mask))

    def run_episode(self, scenario, seed):
        state = reset(scenario, seed, self.world_config)
        counts = {name: 0 for name in PENALTY_FACTORS}
        active = {name: False for name in PENALTY_FACTORS}
        infraction_score = 1.0
        reason = 'none'
        while not state.terminal:
            candidates = generate_candidates(state, vocab_config=self.vocab_config)
            index = self.choose(state, candidates)
            for outcome in follow_trajectory(state, candidates.trajectories[index], self.decision_interval,
                                             self.gains):
                for name, factor in PENALTY_FACTORS.items():
                    on = bool(getattr(outcome.flags, name))
                    if on and not active[name]:
                        counts[name] += 1
                        infraction_score *= factor
                    active[name] = on
                state = outcome.next_state
                reason = outcome.terminal_reason
        route_completion = min(1.0, state.route_progress / scenario.route.total_length)
        row = {'success': reason == 'route_complete', 'route_completion': route_completion,
               'infraction_score': infraction_score, 'driving_score': route_completion*infraction_score,
               'terminal_reason': reason, 'steps': state.step_index}
        row.update({EVENT_COUNTS[name]: counts[name] for name in PENALTY_FACTORS})
        return row

    def start(self):
        rows = []
        total = len(self.scenarios)*self.episodes
        with tqdm(total=total, desc='eval episodes', leave=False) as pbar:
            for si, scenario in enumerate(self.scenarios):
                for e in range(self.episodes):
                    seed = self.episode_seed(si, e)
                    row = {'episode_id': si*self.episodes + e, 'scenario': scenario.name, 'episode': e, 'seed': seed}
                    row.update(self.run_episode(scenario, seed))
                    rows.append(row)
                    pbar.update(1)
        self.report = EvalReport(pd.DataFrame(rows))
        return self.report


def _summary_row(name, df):
    n = len(df)
    return {'scenario': name, 'episodes': n,
            'success_rate': 100.0*float(df['success'].mean()),
            'route_completion': 100.0*float(df['route_completion'].mean()),
            'infraction_score': float(df['infraction_score'].mean()),
            'driving_score': 100.0*float(df['driving_score'].mean()),
            'collisions_per_episode': float(df['collisions'].mean()),
            'collisions': int(df['collisions'].sum()), 'red_violations': int(df['red_violations'].sum()),
            'stop_violations': int(df['stop_violations'].sum()), 'offroad_events': int(df['offroad_events'].sum())}


class EvalReport:
    '''per-episode rows plus per-scenario and aggregate ("all") summary rows'''
    def __init__(self, episodes):
        if len(episodes) > 0:
            episodes = episodes.sort_values('episode_id').reset_index(drop=True)
        self.episodes = episodes
        rows = []
        if len(episodes) > 0:
            for name in pd.unique(episodes['scenario']):
                rows.append(_summary_row(name, episodes[episodes['scenario'] == name]))
            rows.append(_summary_row('all', episodes))
        self.summary = pd.DataFrame(rows, columns=list(SUMMARY_COLUMNS))

    @property
    def seeds(self):
        return [] if len(self.episodes) == 0 else [int(s) for s in self.episodes['seed']]

    @property
    def aggregate(self):
        if len(self.summary) == 0:
            return {}
        return self.summary[self.summary['scenario'] == 'all'].iloc[0].to_dict()

    def to_dict(self):
        return {'summary': json.loads(self.summary.to_json(orient='records', double_precision=15)),
                'episodes': json.loads(self.episodes.to_json(orient='records', double_precision=15))
                if len(self.episodes) > 0 else [],
                'seeds': self.seeds}

    def save(self, out_dir, name='eval_report'):
        if not os.path.exists(out_dir):
            os.makedirs(out_dir)
        json_path = os.path.join(out_dir, name + '.json')
        csv_path = os.path.join(out_dir, name + '.csv')
        with open(json_path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        self.summary.to_csv(csv_path, index=False)
        return json_path, csv_path


def cmd_eval(checkpoint, scenarios, episodes, seed, run_config, out_dir, chooser=None):
    '''load a checkpoint, evaluate it greedily and write eval_report.json/.csv'''
    params, _, _, _ = load_checkpoint(checkpoint, run_config.vocab)
    scenarios = load_scenarios(scenarios)
    report = evaller(params, scenarios, episodes, seed, run_config.vocab, run_config.world,
                     run_config.trainer.decision_interval, run_config.engine.gains, chooser).start()
    report.save(out_dir)
    return report


if __name__ == '__main__':
    parser = ArgumentParser()
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--config", default=None)
    parser.add_argument("--episodes", type=int, default=10)
    parser.add_argument("--seed", type=int, default=1000)
    parser.add_argument("--scenario", nargs='+', default=None)
    parser.add_argument("--out_dir", default='.')
    ARGS = parser.parse_args()

    run_config = load_run_config(ARGS.config)
    scenarios = ARGS.scenario if ARGS.scenario is not None else list(run_config.eval_scenarios)
    report = cmd_eval(ARGS.checkpoint, scenarios, ARGS.episodes, ARGS.seed, run_config, ARGS.out_dir)
    print(report.summary.to_string(index=False))
