'''
Policy distributions over the trajectory vocabulary at one decision step,
for comparing checkpoints (e.g. pre-trained against fine-tuned) on the same
state. The state is reached by letting the rule-based expert drive, so every
checkpoint is scored on an identical snapshot.
'''
import os

import pandas as pd

import sys; sys.path.append('..'); sys.path.append('.')
from sim.microworld import reset, follow_trajectory, snapshot_for_counterfactual
from policy.vocabulary import VocabConfig, generate_candidates, mode_table
from policy.features import candidate_features
from policy.scorer import policy_distribution, load_checkpoint
from policy.pretrain import PretrainConfig, expert_choice

BRAKING_SPEED = 2.0


def state_at_decision(scenario, step, seed, vocab_config=None, world_config=None, decision_interval=5,
                      pretrain_config=PretrainConfig()):
    '''world state at decision `step` (0 is the reset state) along the expert's drive'''
    if step < 0:
        raise ValueError('decision step must be >= 0')
    state = reset(scenario, seed, world_config)
    for k in range(step):
        if state.terminal:
            raise ValueError('decision step ' + str(step) + ' is beyond the episode (it ended after '
                             + str(k) + ' decisions)')
        candidates = generate_candidates(state, vocab_config=vocab_config)
        index = expert_choice(state, candidates, vocab_config, pretrain_config)
        state = follow_trajectory(state, candidates.trajectories[index], decision_interval)[-1].next_state
    if state.terminal:
        raise ValueError('decision step ' + str(step) + ' is beyond the episode (it ended after '
                         + str(step) + ' decisions)')
    return state


def snapshot_distribution(checkpoints, scenario, step, seed=0, vocab_config=None, world_config=None,
                          decision_interval=5):
    '''
    long-form DataFrame with one row per (checkpoint, mode): mode index, lateral
    offset, speed target, validity and probability
    '''
    vocab = VocabConfig() if vocab_config is None else vocab_config
    state = state_at_decision(scenario, step, seed, vocab, world_config, decision_interval)
    candidates = generate_candidates(state, vocab_config=vocab)
    features = candidate_features(snapshot_for_counterfactual(state, candidates), candidates, vocab)
    modes = {index: (offset, speed) for index, offset, speed in mode_table(vocab)}
    rows = []
    for checkpoint in checkpoints:
        params, _, _, _ = load_checkpoint(checkpoint, vocab)
        dist = policy_distribution(params, features, candidates.valid_mask)
        name = os.path.splitext(os.path.basename(checkpoint))[0]
        for g in range(len(candidates)):
            offset, speed = modes.get(g, (0.0, 0.0))
            rows.append({'checkpoint': name, 'mode_index': g, 'lateral_offset': offset, 'speed_target': speed,
                         'valid': bool(candidates.valid_mask[g]), 'probability': float(dist.probabilities[g])})
    return pd.DataFrame(rows)


def braking_mass(df):
    '''probability mass on modes with a speed target of at most 2 m/s, per checkpoint'''
    braking = df[df['speed_target'] <= BRAKING_SPEED]
    return braking.groupby('checkpoint', sort=False)['probability'].sum()


def cmd_snapshot_distribution(checkpoints, scenario, step, out_dir, seed=0, vocab_config=None,
                              world_config=None, decision_interval=5):
    df = snapshot_distribution(checkpoints, scenario, step, seed, vocab_config, world_config, decision_interval)
    if not os.path.exists(out_dir):
        os.makedirs(out_dir)
    path = os.path.join(out_dir, 'dist_step' + str(step) + '.csv')
    df.to_csv(path, index=False)
    return path, df
