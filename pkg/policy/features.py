'''
Per-candidate features read by the linear scorer. They are computed from the
counterfactual snapshot with a constant-velocity preview of the other agents,
never from the counterfactual engine, so the policy cannot read its own
proxy reward.
'''
import numpy as np

import sys; sys.path.append('..'); sys.path.append('.')
from sim.geometry import project_points, transform_to_global, normalize_angle
from policy.vocabulary import VocabConfig

FEATURE_NAMES = ('progress', 'min_clearance', 'mean_route_offset', 'terminal_heading_error',
                 'mean_target_speed', 'stop_compliance', 'bias')
N_FEATURES = len(FEATURE_NAMES)

PROGRESS_SCALE = 20.0
CLEARANCE_CAP = 10.0
CLEARANCE_RADIUS = 2.5
OFFSET_SCALE = 3.0
SPEED_SCALE = 10.0
STOP_LOOKAHEAD = 40.0


def _required(control, world_step):
    if control.kind == 'red_light':
        return control.phase_at(world_step) == 'red'
    return not control.stop_served


def candidate_features(snapshot, candidates, vocab_config=None):
    '''(G, F) feature matrix; invalid candidates get all-zero rows'''
    cfg = VocabConfig() if vocab_config is None else vocab_config
    traj = candidates.trajectories
    g, n = traj.shape[:2]
    ego_pose = snapshot.ego.pose
    pts = transform_to_global(traj[..., :2].reshape(-1, 2), ego_pose).reshape(g, n, 2)
    route = snapshot.route_window

    seg = np.diff(np.concatenate([np.broadcast_to(ego_pose.xy, (g, 1, 2)), pts], axis=1), axis=1)
    seg_headings = np.arctan2(seg[..., 1], seg[..., 0])
    seg_len = np.linalg.norm(seg, axis=-1)
    # carry the last meaningful heading through stationary stretches
    headings = np.empty((g, n))
    current = np.full(g, ego_pose.yaw)
    for k in range(n):
        current = np.where(seg_len[:, k] > 1e-6, seg_headings[:, k], current)
        headings[:, k] = current

    s, lateral, herr, _ = project_points(pts.reshape(-1, 2), headings.reshape(-1), route)
    s, lateral, herr = s.reshape(g, n), lateral.reshape(g, n), herr.reshape(g, n)
    progress = s[:, -1] / PROGRESS_SCALE

    clearance = np.full(g, CLEARANCE_CAP)
    if len(snapshot.agents) > 0:
        times = cfg.point_dt*np.arange(1, n + 1)
        centers = np.array([[a.box.center.x, a.box.center.y] for a in snapshot.agents])
        vel = np.array([[a.speed*np.cos(a.box.center.yaw), a.speed*np.sin(a.box.center.yaw)]
                        for a in snapshot.agents])
        future = centers[:, None, :] + vel[:, None, :]*times[None, :, None]
        dists = np.linalg.norm(pts[:, None, :, :] - future[None], axis=-1)
        clearance = np.clip(np.min(dists, axis=(1, 2)) - CLEARANCE_RADIUS, 0.0, CLEARANCE_CAP)
    clearance = clearance / CLEARANCE_CAP

    mean_offset = np.mean(np.abs(lateral), axis=1) / OFFSET_SCALE
    terminal_heading = np.abs(normalize_angle(herr[:, -1]))
    mean_speed = np.mean(traj[..., 2], axis=1) / SPEED_SCALE

    compliance = np.ones(g)
    for control in snapshot.controls:
        ahead = 0.0 <= control.stop_line_arclength <= STOP_LOOKAHEAD
        if ahead and _required(control, snapshot.world_step):
            compliance = np.minimum(compliance, (s[:, -1] < control.stop_line_arclength).astype(float))

    features = np.stack([progress, clearance, mean_offset, terminal_heading, mean_speed,
                         compliance, np.ones(g)], axis=1)
    return np.where(candidates.valid_mask[:, None], features, 0.0)
