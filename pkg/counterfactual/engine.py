'''
Counterfactual world: from a frozen snapshot, track every valid candidate
for H virtual steps with the PID tracker while background agents follow the
decay model, flag infractions geometrically, and turn the dense per-step
rewards into group-normalised advantages.

Candidates are tracked in one batch (chunked by `chunk_size`); agent futures
do not depend on the ego candidate and are computed once per group.
'''
from dataclasses import dataclass, field

import numpy as np

import sys; sys.path.append('..'); sys.path.append('.')
from sim.geometry import box_corners, sat_overlap_corners, project_points, transform_to_global
from sim.dynamics import PidGains, DecayParams, track_trajectory_batch, decay_rollout_batch
from sim.microworld import (InfractionFlags, ego_corners_arrays, lane_flags,
                            zone_membership)
from counterfactual.rewards import (CounterfactualRewardConfig, DeviationSample, progress_term,
                                    efficiency_multiplier, recovery_reward, counterfactual_step_reward)

FLAG_NAMES = ('collision', 'offroad', 'offroute', 'opposite_lane', 'emergency_lane',
              'red_violation', 'stop_violation', 'go_blocked_slow')


@dataclass(frozen=True)
class EngineConfig:
    horizon: int = 20
    dt: float = 0.1
    gamma: float = 0.98
    sigma_min: float = 5.0
    chunk_size: int = 500
    gains: PidGains = field(default_factory=PidGains)
    decay: DecayParams = field(default_factory=DecayParams)

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError('horizon must be >= 1')
        if not 0 < self.gamma < 1:
            raise ValueError('gamma must lie in (0, 1)')
        if self.chunk_size < 1:
            raise ValueError('chunk_size must be >= 1')
        if self.sigma_min <= 0:
            raise ValueError('sigma_min must be positive')


@dataclass(frozen=True)
class StepFlags:
    '''per-candidate per-step infraction indicators, each (G, H)'''
    collision: np.ndarray
    offroad: np.ndarray
    offroute: np.ndarray
    opposite_lane: np.ndarray
    emergency_lane: np.ndarray
    red_violation: np.ndarray
    stop_violation: np.ndarray
    go_blocked_slow: np.ndarray
    collision_speed: np.ndarray

    def at(self, g, t):
        values = {name: bool(getattr(self, name)[g, t]) for name in FLAG_NAMES}
        speed = float(self.collision_speed[g, t]) if values['collision'] else 0.0
        return InfractionFlags(collision_speed=speed, **values)


@dataclass(frozen=True)
class TrajectoryFlags:
    red: np.ndarray     # (G,)
    stop: np.ndarray    # (G,)


@dataclass(frozen=True)
class CounterfactualOutcome:
    states: np.ndarray          # (G, H+1, 4) of x, y, yaw, speed
    step_flags: StepFlags
    traj_flags: TrajectoryFlags
    step_rewards: np.ndarray    # (G, H)
    returns: np.ndarray         # (G,)
    advantages: np.ndarray      # (G,)
    valid_mask: np.ndarray


def _empty_flags(g, h):
    arrays = {name: np.zeros((g, h), dtype=bool) for name in FLAG_NAMES}
    return arrays, np.zeros((g, h))


def _agent_futures(snapshot, horizon, dt, decay):
    agents = snapshot.agents
    if len(agents) == 0:
        return np.zeros((0, horizon + 1, 4, 2)), np.zeros((0, horizon + 1, 2))
    x = np.array([a.box.center.x for a in agents])
    y = np.array([a.box.center.y for a in agents])
    yaw = np.array([a.box.center.yaw for a in agents])
    v = np.array([a.speed for a in agents])
    xs, ys, yaws, vs = decay_rollout_batch(
        x, y, yaw, v, np.array([a.held_accel for a in agents]), np.array([a.held_steer for a in agents]),
        np.array([a.on_connector for a in agents]), np.array([a.wheelbase for a in agents]),
        horizon, dt, decay)
    hl = np.array([a.box.half_length for a in agents])[:, None]
    hw = np.array([a.box.half_width for a in agents])[:, None]
    corners = box_corners(xs, ys, yaws, np.broadcast_to(hl, xs.shape), np.broadcast_to(hw, xs.shape))
    vel = np.stack([vs*np.cos(yaws), vs*np.sin(yaws)], axis=-1)
    return corners, vel


def _track_chunk(snapshot, trajectories, horizon, dt, gains):
    ego = snapshot.ego
    n, p = trajectories.shape[:2]
    pts = transform_to_global(trajectories[..., :2].reshape(-1, 2), ego.pose).reshape(n, p, 2)
    # the current pose is prepended to every reference
    ref_points = np.concatenate([np.broadcast_to(ego.pose.xy, (n, 1, 2)), pts], axis=1)
    ref_speeds = np.concatenate([np.full((n, 1), ego.speed), trajectories[..., 2]], axis=1)
    xs, ys, yaws, vs = track_trajectory_batch(
        np.full(n, ego.pose.x), np.full(n, ego.pose.y), np.full(n, ego.pose.yaw), np.full(n, ego.speed),
        ego.wheelbase, ref_points, ref_speeds, np.ones((n, p + 1), dtype=bool), horizon, dt, gains)
    return np.stack([xs, ys, yaws, vs], axis=-1)


def _chunk_geometry(snapshot, states, agent_corners, agent_vel):
    '''flags and deviation series for a chunk of tracked candidates, states (n, H+1, 4)'''
    n, h1 = states.shape[:2]
    h = h1 - 1
    x, y, yaw, v = states[..., 0], states[..., 1], states[..., 2], states[..., 3]
    flags = {}

    corners = ego_corners_arrays(x[:, 1:], y[:, 1:], yaw[:, 1:], snapshot.ego_half_length,
                                 snapshot.ego_half_width, snapshot.ego_center_offset)
    collision_speed = np.zeros((n, h))
    if len(agent_corners) > 0:
        overlap = sat_overlap_corners(corners[:, None], agent_corners[None, :, 1:])
        ego_vel = np.stack([v[:, 1:]*np.cos(yaw[:, 1:]), v[:, 1:]*np.sin(yaw[:, 1:])], axis=-1)
        rel = np.linalg.norm(agent_vel[None, :, 1:] - ego_vel[:, None], axis=-1)
        hits = overlap & (rel >= snapshot.collision_min_speed)
        flags['collision'] = np.any(hits, axis=1)
        collision_speed = np.max(np.where(hits, rel, 0.0), axis=1)
    else:
        flags['collision'] = np.zeros((n, h), dtype=bool)

    points = np.stack([x, y], axis=-1).reshape(-1, 2)
    headings = yaw.reshape(-1)
    offroad, opposite, emergency, lane_dev = lane_flags(snapshot.lanes, points, headings,
                                                        snapshot.offroad_margin)
    offroad, opposite, emergency = (a.reshape(n, h1) for a in (offroad, opposite, emergency))
    lane_dev = lane_dev.reshape(n, h1)
    flags['offroad'], flags['opposite_lane'], flags['emergency_lane'] = offroad[:, 1:], opposite[:, 1:], emergency[:, 1:]

    s, lateral, herr, _ = project_points(points, headings, snapshot.route_window)
    s, lateral, herr = s.reshape(n, h1), lateral.reshape(n, h1), herr.reshape(n, h1)
    flags['offroute'] = np.abs(lateral[:, 1:]) > snapshot.offroute_threshold

    red = np.zeros((n, h), dtype=bool)
    stop = np.zeros((n, h), dtype=bool)
    go_zone = np.zeros((n, h), dtype=bool)
    for control in snapshot.controls:
        inside = zone_membership(control.trigger_zone, points).reshape(n, h1)
        crossed = (s[:, :-1] < control.stop_line_arclength) & (s[:, 1:] >= control.stop_line_arclength)
        if control.kind == 'red_light':
            phases = np.array([control.phase_at(snapshot.world_step + t) for t in range(1, h1)])
            required = np.broadcast_to(phases == 'red', (n, h))
            red |= required & crossed
        else:
            halted = np.cumsum(inside & (v <= snapshot.v_stop), axis=1) > 0
            required = ~(control.stop_served | halted[:, 1:])
            stop |= required & crossed
        go_zone |= inside[:, 1:] & ~required
    flags['red_violation'], flags['stop_violation'] = red, stop

    slow = go_zone & (v[:, 1:] < snapshot.v_go)
    blocked = np.zeros((n, h), dtype=bool)
    if np.any(slow) and len(agent_corners) > 0:
        reach = snapshot.ego_center_offset + snapshot.ego_half_length + 5.0
        cx = x[:, 1:] + reach*np.cos(yaw[:, 1:])
        cy = y[:, 1:] + reach*np.sin(yaw[:, 1:])
        clear_box = box_corners(cx, cy, yaw[:, 1:], np.full((n, h), 5.0), np.full((n, h), 1.75))
        blocked = np.any(sat_overlap_corners(clear_box[:, None], agent_corners[None, :, 1:]), axis=1)
    flags['go_blocked_slow'] = slow & ~blocked

    deviations = (np.abs(lateral), lane_dev, np.abs(herr))
    return flags, collision_speed, s, deviations


def _simulate(snapshot, candidates, horizon, dt, gains, chunk_size, decay):
    valid = candidates.valid_mask
    if not np.any(valid):
        raise ValueError('empty candidate group')
    if horizon < 1:
        raise ValueError('horizon must be >= 1, got ' + str(horizon))
    g = len(candidates)
    ego = snapshot.ego
    states = np.tile(np.array([ego.pose.x, ego.pose.y, ego.pose.yaw, ego.speed]), (g, horizon + 1, 1))
    flag_arrays, collision_speed = _empty_flags(g, horizon)
    progress = np.zeros((g, horizon + 1))
    deviations = tuple(np.zeros((g, horizon + 1)) for _ in range(3))
    agent_corners, agent_vel = _agent_futures(snapshot, horizon, dt, decay)
    ids_valid = np.nonzero(valid)[0]
    for start in range(0, len(ids_valid), chunk_size):
        ids = ids_valid[start:start + chunk_size]
        chunk_states = _track_chunk(snapshot, candidates.trajectories[ids], horizon, dt, gains)
        states[ids] = chunk_states
        flags, speeds, s, devs = _chunk_geometry(snapshot, chunk_states, agent_corners, agent_vel)
        for name in FLAG_NAMES:
            flag_arrays[name][ids] = flags[name]
        collision_speed[ids] = speeds
        progress[ids] = s
        for full, part in zip(deviations, devs):
            full[ids] = part
    collision_speed = np.where(flag_arrays['collision'], collision_speed, 0.0)
    step_flags = StepFlags(collision_speed=collision_speed, **flag_arrays)
    traj_flags = TrajectoryFlags(np.any(step_flags.red_violation, axis=1),
                                 np.any(step_flags.stop_violation, axis=1))
    return states, step_flags, traj_flags, progress, deviations


def rollout_candidates(snapshot, candidates, horizon=20, dt=0.1, gains=None, chunk_size=500, decay=None):
    '''tracked states (G, H+1, 4), per-step flags and trajectory-level red/stop flags'''
    gains = PidGains() if gains is None else gains
    decay = DecayParams() if decay is None else decay
    states, step_flags, traj_flags, _, _ = _simulate(snapshot, candidates, horizon, dt, gains,
                                                     chunk_size, decay)
    return states, step_flags, traj_flags


def counterfactual_return(step_rewards, traj_flags, gamma, lambda_red, lambda_stop):
    '''
    discounted sum of step rewards minus the trajectory-level red/stop
    penalties (charged once). step_rewards may be (H,) with scalar flags or
    (G, H) with (red, stop) arrays
    '''
    if not 0 < gamma < 1:
        raise ValueError('gamma must lie in (0, 1)')
    step_rewards = np.asarray(step_rewards, dtype=float)
    discounts = gamma ** np.arange(step_rewards.shape[-1])
    red, stop = (traj_flags.red, traj_flags.stop) if hasattr(traj_flags, 'red') else traj_flags
    ret = step_rewards @ discounts - lambda_red*np.asarray(red, dtype=float) - lambda_stop*np.asarray(stop, dtype=float)
    return float(ret) if np.ndim(ret) == 0 else ret


def group_advantages(returns, valid_mask, sigma_min, G_valid=None):
    '''population-std normalisation over valid candidates with a std floor; invalid get 0'''
    returns = np.asarray(returns, dtype=float)
    valid_mask = np.asarray(valid_mask, dtype=bool)
    count = int(np.sum(valid_mask)) if G_valid is None else int(G_valid)
    if count < 1:
        raise ValueError('group advantages need at least one valid candidate')
    mu = np.sum(np.where(valid_mask, returns, 0.0)) / count
    var = np.sum(np.where(valid_mask, (returns - mu)**2, 0.0)) / count
    sigma = max(np.sqrt(var), sigma_min)
    return np.where(valid_mask, (returns - mu)/sigma, 0.0)


def step_rewards_from(step_flags, progress, deviations, reward_config):
    delta_p = progress[:, 1:] - progress[:, :-1]
    d_g, d_c, d_h = deviations
    sample = DeviationSample(d_g[:, 1:], d_c[:, 1:], d_h[:, 1:], d_g[:, 1:] - d_g[:, :-1],
                             d_c[:, 1:] - d_c[:, :-1], d_h[:, 1:] - d_h[:, :-1])
    progress_hat = progress_term(delta_p, reward_config)
    eta = efficiency_multiplier(sample, reward_config)
    r_rec = recovery_reward(sample, progress_hat, reward_config)
    collided = step_flags.collision
    first = collided & (np.cumsum(collided, axis=1) == 1)
    return counterfactual_step_reward(progress_hat, eta, r_rec, step_flags, first,
                                      step_flags.collision_speed, reward_config)


def evaluate_group(snapshot, candidates, reward_config=None, engine_config=None):
    reward_config = CounterfactualRewardConfig() if reward_config is None else reward_config
    engine_config = EngineConfig() if engine_config is None else engine_config
    states, step_flags, traj_flags, progress, deviations = _simulate(
        snapshot, candidates, engine_config.horizon, engine_config.dt, engine_config.gains,
        engine_config.chunk_size, engine_config.decay)
    valid = candidates.valid_mask
    step_rewards = np.where(valid[:, None], step_rewards_from(step_flags, progress, deviations,
                                                              reward_config), 0.0)
    returns = counterfactual_return(step_rewards, traj_flags, engine_config.gamma,
                                    reward_config.lambda_red, reward_config.lambda_stop)
    returns = np.where(valid, returns, 0.0)
    advantages = group_advantages(returns, valid, engine_config.sigma_min)
    return CounterfactualOutcome(states, step_flags, traj_flags, step_rewards, returns, advantages, valid)
