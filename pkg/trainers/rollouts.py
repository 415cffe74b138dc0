'''
Closed-loop rollout collection under a frozen behaviour policy, and the
counterfactual evaluation of the stored candidate groups.
'''
import multiprocessing
from dataclasses import dataclass, replace

import numpy as np
from tqdm import tqdm

import sys; sys.path.append('..'); sys.path.append('.')
from sim.dynamics import PidGains
from sim.microworld import reset, follow_trajectory, snapshot_for_counterfactual, measure_deviations
from counterfactual.engine import evaluate_group, EngineConfig
from counterfactual.records import load_records
from counterfactual.rewards import (CounterfactualRewardConfig, CorrectiveRewardConfig, DeviationSample,
                                    corrective_reward, closed_loop_reward)
from policy.vocabulary import VocabConfig, generate_candidates
from policy.features import candidate_features
from policy.scorer import policy_distribution, sample_candidate


@dataclass(frozen=True)
class RolloutTransition:
    snapshot: object
    candidates: object
    features: np.ndarray
    selected_index: int
    behavior_log_probability: float
    behavior_probabilities: np.ndarray
    r_gr: float
    r_cl: float
    u_done: bool
    u_term: bool
    episode_id: int
    step_index: int
    policy_version: int
    # features at the next state when the buffer ends mid-episode (value bootstrap)
    bootstrap_features: np.ndarray = None
    bootstrap_probabilities: np.ndarray = None
    terminal_reason: str = 'none'
    cp_returns: np.ndarray = None
    cp_advantages: np.ndarray = None

    def __post_init__(self):
        if not self.candidates.valid_mask[self.selected_index]:
            raise ValueError('selected candidate ' + str(self.selected_index) + ' is masked invalid')
        if not np.isfinite(self.behavior_log_probability):
            raise ValueError('behaviour log-probability must be finite')


@dataclass(frozen=True)
class RolloutBuffer:
    transitions: tuple
    capacity: int
    policy_version: int
    episodes: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, 'transitions', tuple(self.transitions))
        versions = {t.policy_version for t in self.transitions}
        if versions and versions != {self.policy_version}:
            raise ValueError('buffer mixes policy versions ' + str(sorted(versions)))

    def __len__(self):
        return len(self.transitions)

    @property
    def evaluated(self):
        return len(self.transitions) > 0 and all(t.cp_advantages is not None for t in self.transitions)


def _interval_rewards(state, outcomes, cp_config, gr_config):
    '''corrective and closed-loop rewards summed over the executed world steps'''
    r_gr, r_cl = 0.0, 0.0
    prev = state
    prev_dev = measure_deviations(state)
    for outcome in outcomes:
        nxt = outcome.next_state
        dev = measure_deviations(nxt)
        r_gr += corrective_reward(outcome.flags, gr_config)
        r_cl += closed_loop_reward(nxt.route_progress - prev.route_progress,
                                   DeviationSample.between(prev_dev, dev), outcome.flags, cp_config)
        prev, prev_dev = nxt, dev
    return r_gr, r_cl


def collect_rollouts(policy_old, scenarios, B, seed, vocab_config=None, world_config=None,
                     cp_config=None, gr_config=None, decision_interval=5, gains=None):
    '''
    fill a buffer of exactly B decision steps, cycling through the scenarios
    with a fresh seed per episode
    '''
    if B < 1:
        raise ValueError('buffer size must be >= 1')
    if len(scenarios) == 0:
        raise ValueError('no scenarios to collect from')
    vocab_config = VocabConfig() if vocab_config is None else vocab_config
    cp_config = CounterfactualRewardConfig() if cp_config is None else cp_config
    gr_config = CorrectiveRewardConfig() if gr_config is None else gr_config
    gains = PidGains() if gains is None else gains
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))

    transitions, episodes = [], []
    episode = 0
    pbar = tqdm(total=B, desc='collect', leave=False)
    while len(transitions) < B:
        scenario = scenarios[episode % len(scenarios)]
        episode_seed = int(np.random.SeedSequence([seed, episode]).generate_state(1)[0])
        state = reset(scenario, episode_seed, world_config)
        step, collisions, reason = 0, 0, 'truncated'
        while not state.terminal and len(transitions) < B:
            candidates = generate_candidates(state, vocab_config=vocab_config)
            snapshot = snapshot_for_counterfactual(state, candidates)
            features = candidate_features(snapshot, candidates, vocab_config)
            dist = policy_distribution(policy_old, features, candidates.valid_mask)
            index, log_p = sample_candidate(dist, rng)
            outcomes = follow_trajectory(state, candidates.trajectories[index], decision_interval, gains)
            r_gr, r_cl = _interval_rewards(state, outcomes, cp_config, gr_config)
            collisions += sum(int(o.flags.collision) for o in outcomes)
            next_state = outcomes[-1].next_state
            terminal = outcomes[-1].terminal
            buffer_end = len(transitions) + 1 == B

            bootstrap_f, bootstrap_p = None, None
            if buffer_end and not terminal:
                next_candidates = generate_candidates(next_state, vocab_config=vocab_config)
                next_snapshot = snapshot_for_counterfactual(next_state, next_candidates)
                bootstrap_f = candidate_features(next_snapshot, next_candidates, vocab_config)
                bootstrap_p = policy_distribution(policy_old, bootstrap_f, next_candidates.valid_mask).probabilities

            transitions.append(RolloutTransition(
                snapshot=snapshot, candidates=candidates, features=features, selected_index=index,
                behavior_log_probability=log_p, behavior_probabilities=dist.probabilities,
                r_gr=float(r_gr), r_cl=float(r_cl),
                u_done=not (terminal or buffer_end), u_term=not terminal,
                episode_id=episode, step_index=step, policy_version=policy_old.version,
                bootstrap_features=bootstrap_f, bootstrap_probabilities=bootstrap_p,
                terminal_reason=outcomes[-1].terminal_reason))
            pbar.update(1)
            if terminal:
                reason = outcomes[-1].terminal_reason
            state = next_state
            step += 1
        episodes.append({'episode_id': episode, 'scenario': scenario.name, 'decisions': step,
                         'collisions': collisions, 'terminal_reason': reason})
        episode += 1
    pbar.close()
    return RolloutBuffer(tuple(transitions), B, policy_old.version, tuple(episodes))


def _evaluate_one(args):
    snapshot, candidates, reward_config, engine_config = args
    outcome = evaluate_group(snapshot, candidates, reward_config, engine_config)
    return outcome.returns, outcome.advantages


def evaluate_buffer_counterfactuals(buffer, reward_config=None, engine_config=None, workers=1, records_file=None):
    '''
    run the counterfactual engine on every stored group; returns a new buffer
    whose transitions carry cp_returns and cp_advantages.
    with records_file the groups are read from the snapshot records the round
    wrote, which must hold the buffer's candidate groups in order
    '''
    reward_config = CounterfactualRewardConfig() if reward_config is None else reward_config
    engine_config = EngineConfig() if engine_config is None else engine_config
    if records_file is None:
        groups = [(t.snapshot, t.candidates) for t in buffer.transitions]
    else:
        groups = load_records(records_file)
        if len(groups) != len(buffer.transitions):
            raise ValueError('records file holds ' + str(len(groups)) + ' groups, buffer has '
                             + str(len(buffer.transitions)))
        for i, ((_, candidates), t) in enumerate(zip(groups, buffer.transitions)):
            if candidates is None or candidates != t.candidates:
                raise ValueError('records file group ' + str(i) + ' does not match the buffer')
    jobs = [(snapshot, candidates, reward_config, engine_config) for snapshot, candidates in groups]
    if workers > 1:
        workers = min(workers, multiprocessing.cpu_count())
        with multiprocessing.Pool(workers) as pool:
            results = pool.map(_evaluate_one, jobs)
    else:
        results = [_evaluate_one(job) for job in tqdm(jobs, desc='counterfactual', leave=False)]
    transitions = [replace(t, cp_returns=r, cp_advantages=a) for t, (r, a) in zip(buffer.transitions, results)]
    return replace(buffer, transitions=tuple(transitions))
