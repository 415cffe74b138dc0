'''
Pre-training: a rule-based expert (keep to the route centre, cruise, brake
for hazards and stop-required controls) drives offline episodes and the
linear scorer is fit to its choices by regularised behaviour cloning.
'''
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from tqdm import tqdm

import sys; sys.path.append('..'); sys.path.append('.')
from sim.geometry import project_points
from sim.microworld import reset, follow_trajectory, snapshot_for_counterfactual, stop_required
from policy.vocabulary import VocabConfig, generate_candidates, mode_table
from policy.features import candidate_features, N_FEATURES
from policy.scorer import PolicyParams, masked_log_softmax


@dataclass(frozen=True)
class PretrainConfig:
    episodes_per_scenario: int = 3
    l2: float = 1e-2
    max_iter: int = 200
    cruise_speed: float = 8.0
    curve_speed: float = 5.0
    comfort_decel: float = 3.0
    hazard_lateral: float = 2.5
    hazard_preview: float = 2.5
    decision_interval: int = 5


def expert_speed_target(state, cfg=PretrainConfig()):
    '''speed the expert wants at this state, before snapping to the vocabulary'''
    ego = state.ego
    route = state.scenario.route
    s_ego = state.route_progress
    front = state.config.ego_center_offset + state.config.ego_half_length
    stopping = ego.speed**2/(2*cfg.comfort_decel) + front + 6.0
    target = cfg.cruise_speed
    ahead = route.heading_at(min(s_ego + 20.0, route.total_length)) - route.heading_at(s_ego)
    if abs(math.remainder(float(ahead), 2*math.pi)) > 0.5:
        target = cfg.curve_speed

    obstacles = [(a.pose, a.velocity) for a in state.agents if not a.exited]
    obstacles += [(p.pose, p.velocity) for p in state.pedestrians]
    if obstacles:
        centers = np.array([[p.x, p.y] for p, _ in obstacles])
        vels = np.array([v for _, v in obstacles])
        s, lateral, _, _ = project_points(centers, np.zeros(len(centers)), route,
                                          s_min=s_ego, s_max=s_ego + stopping + 15.0)
        headings = route.heading_at(s)
        along = vels[:, 0]*np.cos(headings) + vels[:, 1]*np.sin(headings)
        across = -vels[:, 0]*np.sin(headings) + vels[:, 1]*np.cos(headings)
        for k in range(len(centers)):
            ds = s[k] - s_ego
            if not 0.0 < ds < stopping + 10.0:
                continue
            preview = lateral[k] + across[k]*np.linspace(0.0, cfg.hazard_preview, 6)
            if np.min(np.abs(preview)) < cfg.hazard_lateral:
                target = min(target, 0.0 if along[k] < 1.0 or ds < front + 4.0 else float(along[k]))

    for i, control in enumerate(state.scenario.traffic_controls):
        if not stop_required(control.kind, state.signal_phases[i], state.stop_served[i]):
            continue
        to_line = control.stop_line_arclength - s_ego
        if 0.0 < to_line < stopping + 4.0:
            target = 0.0
    return target


def expert_choice(state, candidates, vocab_config=None, cfg=PretrainConfig()):
    '''vocabulary index the expert selects: route centre at the best speed not above its target'''
    vocab = VocabConfig() if vocab_config is None else vocab_config
    target = expert_speed_target(state, cfg)
    g = len(candidates)
    best, best_key = None, None
    for index, offset, speed in mode_table(vocab):
        if index >= g or not candidates.valid_mask[index]:
            continue
        over = speed > target + 1e-9
        key = (abs(offset), over, abs(speed - target))
        if best_key is None or key < best_key:
            best, best_key = index, key
    if best is None:
        best = int(np.flatnonzero(candidates.valid_mask)[0])
    return best


def collect_expert_dataset(scenarios, vocab_config, world_config, cfg, seed):
    '''(features (N, G, F), masks (N, G), expert indices (N,)) from expert-driven episodes'''
    feats, masks, choices = [], [], []
    for si, scenario in enumerate(tqdm(scenarios, desc='expert episodes', leave=False)):
        for e in range(cfg.episodes_per_scenario):
            episode_seed = int(np.random.SeedSequence([seed, 7919, si, e]).generate_state(1)[0])
            state = reset(scenario, episode_seed, world_config)
            while not state.terminal:
                candidates = generate_candidates(state, vocab_config=vocab_config)
                snapshot = snapshot_for_counterfactual(state, candidates)
                index = expert_choice(state, candidates, vocab_config, cfg)
                feats.append(candidate_features(snapshot, candidates, vocab_config))
                masks.append(candidates.valid_mask)
                choices.append(index)
                outcomes = follow_trajectory(state, candidates.trajectories[index], cfg.decision_interval)
                state = outcomes[-1].next_state
    if len(feats) == 0:
        return np.zeros((0, vocab_config.group_size, N_FEATURES)), np.zeros((0, vocab_config.group_size), bool), np.zeros(0, int)
    return np.array(feats), np.array(masks), np.array(choices)


def behavior_cloning_loss(weights, features, masks, choices, l2):
    '''mean negative log-likelihood of the expert choices plus an L2 penalty, with gradient'''
    log_p = masked_log_softmax(features @ weights, masks)
    rows = np.arange(len(choices))
    probs = np.where(masks, np.exp(log_p), 0.0)
    nll = -np.mean(log_p[rows, choices])
    mean_feat = np.einsum('ng,ngf->nf', probs, features)
    grad = -np.mean(features[rows, choices] - mean_feat, axis=0)
    return nll + 0.5*l2*weights @ weights, grad + l2*weights


def fit_behavior_cloning(features, masks, choices, l2=1e-2, max_iter=200):
    w0 = np.zeros(features.shape[-1])
    if len(choices) == 0:
        return w0, {'bc_nll': float('nan'), 'bc_accuracy': float('nan'), 'bc_samples': 0}
    result = minimize(behavior_cloning_loss, w0, args=(features, masks, choices, l2), jac=True,
                      method='L-BFGS-B', options={'maxiter': max_iter})
    w = result.x
    logits = np.where(masks, features @ w, -np.inf)
    accuracy = float(np.mean(np.argmax(logits, axis=1) == choices))
    nll, _ = behavior_cloning_loss(w, features, masks, choices, 0.0)
    return w, {'bc_nll': float(nll), 'bc_accuracy': accuracy, 'bc_samples': int(len(choices))}


def pretrain_policy(scenarios, vocab_config, world_config, cfg=PretrainConfig(), seed=0):
    features, masks, choices = collect_expert_dataset(scenarios, vocab_config, world_config, cfg, seed)
    weights, stats = fit_behavior_cloning(features, masks, choices, cfg.l2, cfg.max_iter)
    print('Behaviour cloning on ' + str(stats['bc_samples']) + ' decisions, accuracy: '
          + str(round(stats['bc_accuracy'], 3)))
    return PolicyParams(weights, 0), stats
