'''
Candidate generation: a fixed parametric trajectory vocabulary.

Mode k is the k-th element of lateral_offsets x speed_targets (offsets
major), so mode indices are stable across episodes and runs sharing a
VocabConfig. Each mode blends from the ego's current route offset to the
target offset and ramps the speed to the target with acceleration limits;
waypoints are time spaced and expressed in the ego frame.
'''
import json
import hashlib
from dataclasses import dataclass, asdict

import numpy as np

import sys; sys.path.append('..'); sys.path.append('.')
from sim.geometry import project_points, transform_to_global, transform_to_local
from sim.microworld import nearest_lane
from counterfactual.records import CandidateSet


@dataclass(frozen=True)
class VocabConfig:
    lateral_offsets: tuple = (-3.0, -1.5, 0.0, 1.5, 3.0)
    speed_targets: tuple = (0.0, 2.0, 5.0, 8.0, 11.0)
    n_points: int = 16
    point_dt: float = 0.25
    accel_up: float = 3.0
    accel_down: float = 6.0
    offmap_margin: float = 0.5
    group_size: int = 25

    def __post_init__(self):
        object.__setattr__(self, 'lateral_offsets', tuple(float(o) for o in self.lateral_offsets))
        object.__setattr__(self, 'speed_targets', tuple(float(v) for v in self.speed_targets))
        if min(self.speed_targets) < 0:
            raise ValueError('speed targets must be non-negative')
        if self.n_points < 2 or self.point_dt <= 0:
            raise ValueError('vocabulary needs n_points >= 2 and point_dt > 0')
        if self.group_size < 2:
            raise ValueError('group_size must be >= 2')

    @property
    def n_modes(self):
        return len(self.lateral_offsets)*len(self.speed_targets)

    @property
    def horizon_time(self):
        return self.n_points*self.point_dt

    def hash(self):
        doc = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(doc.encode('utf-8')).hexdigest()


def mode_table(cfg):
    '''(mode_index, lateral_offset, speed_target) for every vocabulary mode'''
    return [(i*len(cfg.speed_targets) + j, off, v)
            for i, off in enumerate(cfg.lateral_offsets)
            for j, v in enumerate(cfg.speed_targets)]


def speed_profiles(v0, targets, times, accel_up, accel_down):
    '''accel-limited speed (M, N) and travelled distance (M, N) toward each target'''
    targets = np.asarray(targets, dtype=float)[:, None]
    rate = np.where(targets >= v0, accel_up, -accel_down)
    t_switch = np.abs(targets - v0) / np.abs(rate)
    t = np.broadcast_to(times, (len(targets), len(times)))
    ramping = t <= t_switch
    speeds = np.where(ramping, v0 + rate*t, targets)
    ramp_dist = v0*np.minimum(t, t_switch) + 0.5*rate*np.minimum(t, t_switch)**2
    dist = ramp_dist + np.where(ramping, 0.0, targets*(t - t_switch))
    return speeds, np.maximum(dist, 0.0)


def route_points_extended(route, s):
    '''route points at arclength s, continuing straight past the route end'''
    s = np.asarray(s, dtype=float)
    base = route.point_at(s)
    heading = route.heading_at(s)
    beyond = np.maximum(s - route.total_length, 0.0)
    return base + beyond[..., None]*np.stack([np.cos(heading), np.sin(heading)], axis=-1), heading


def generate_candidates(state, scenario=None, G=None, vocab_config=None):
    '''
    candidate group at a world state. G below the vocabulary size keeps the
    first G modes; above it the group is padded with invalid entries
    '''
    cfg = VocabConfig() if vocab_config is None else vocab_config
    scenario = state.scenario if scenario is None else scenario
    G = cfg.group_size if G is None else G
    if G < 2:
        raise ValueError('candidate group size must be >= 2, got ' + str(G))
    ego = state.ego
    route = scenario.route
    s0, lat0, _, _ = project_points([ego.pose.xy], [ego.pose.yaw], route,
                                    s_min=state.route_progress - 2.0, s_max=state.route_progress + 20.0)
    s0, lat0 = float(s0[0]), float(lat0[0])
    modes = mode_table(cfg)
    offsets = np.array([off for _, off, _ in modes])
    targets = np.array([v for _, _, v in modes])
    times = cfg.point_dt*np.arange(1, cfg.n_points + 1)
    speeds, dist = speed_profiles(ego.speed, targets, times, cfg.accel_up, cfg.accel_down)
    total = dist[:, -1:]
    moving = total[:, 0] > 1e-9
    frac = np.where(moving[:, None], dist/np.where(moving[:, None], total, 1.0), 0.0)
    blend = 3*frac**2 - 2*frac**3
    lateral = lat0 + (offsets[:, None] - lat0)*blend
    base, heading = route_points_extended(route, s0 + dist)
    normal = np.stack([-np.sin(heading), np.cos(heading)], axis=-1)
    global_pts = base + lateral[..., None]*normal
    local = transform_to_local(global_pts.reshape(-1, 2), ego.pose).reshape(len(modes), cfg.n_points, 2)
    # stationary modes keep every waypoint on the ego
    local = np.where(moving[:, None, None], local, 0.0)
    trajectories = np.concatenate([local, speeds[..., None]], axis=-1)

    endpoints = transform_to_global(local[:, -1, :], ego.pose)
    idx, _, _, dist_lane = nearest_lane(scenario.lanes, endpoints, np.zeros(len(endpoints)))
    widths = np.array([lane.width for lane in scenario.lanes])[idx]
    valid = dist_lane <= widths/2 + cfg.offmap_margin

    if G <= len(modes):
        trajectories, valid = trajectories[:G], valid[:G]
    else:
        pad = G - len(modes)
        trajectories = np.concatenate([trajectories, np.zeros((pad, cfg.n_points, 3))], axis=0)
        valid = np.concatenate([valid, np.zeros(pad, dtype=bool)])
    if not np.any(valid):
        # fall back to the stationary route-centre mode
        valid = valid.copy()
        valid[int(np.argmin(targets[:G] + np.abs(offsets[:G])*1e3))] = True
    return CandidateSet(trajectories, np.zeros(G), valid)
