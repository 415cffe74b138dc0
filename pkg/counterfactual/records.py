'''
Immutable records handed from the collectors to the counterfactual engine:
the candidate group proposed at a visited state and the frozen snapshot of
the world around it. Both serialise to versioned JSON so stored groups can
be re-evaluated offline.
'''
import json
from dataclasses import dataclass, field

import numpy as np

import sys; sys.path.append('..'); sys.path.append('.')
from sim.geometry import Pose2D, OrientedBox, Polyline
from sim.dynamics import BicycleState, DecayAgentState

RECORD_VERSION = 1


def _frozen_array(values, dtype=float):
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Lane:
    lane_id: str
    kind: str
    centerline: Polyline
    width: float

    def __post_init__(self):
        if self.kind not in ('driving', 'opposite', 'emergency', 'connector'):
            raise ValueError('unknown lane kind: ' + str(self.kind))
        if self.width <= 0:
            raise ValueError('lane ' + str(self.lane_id) + ' has non-positive width')


@dataclass(frozen=True)
class CandidateSet:
    trajectories: np.ndarray        # (G, H_traj, 3) of (x, y, target_speed) in ego frame
    logits: np.ndarray              # (G,)
    valid_mask: np.ndarray          # (G,) bool

    def __post_init__(self):
        traj = _frozen_array(self.trajectories)
        if traj.ndim != 3 or traj.shape[-1] != 3:
            raise ValueError('trajectories must have shape (G, H_traj, 3), got ' + str(traj.shape))
        logits = _frozen_array(np.broadcast_to(np.asarray(self.logits, dtype=float), traj.shape[:1]))
        mask = _frozen_array(np.asarray(self.valid_mask).reshape(-1), dtype=bool)
        if len(mask) != traj.shape[0]:
            raise ValueError('valid_mask length ' + str(len(mask)) + ' != group size ' + str(traj.shape[0]))
        object.__setattr__(self, 'trajectories', traj)
        object.__setattr__(self, 'logits', logits)
        object.__setattr__(self, 'valid_mask', mask)

    def __len__(self):
        return self.trajectories.shape[0]

    def __eq__(self, other):
        return (isinstance(other, CandidateSet)
                and np.array_equal(self.trajectories, other.trajectories)
                and np.array_equal(self.logits, other.logits)
                and np.array_equal(self.valid_mask, other.valid_mask))

    __hash__ = None

    def permuted(self, order):
        order = np.asarray(order)
        return CandidateSet(self.trajectories[order], self.logits[order], self.valid_mask[order])


@dataclass(frozen=True)
class ControlSnapshot:
    '''a traffic control as seen from the snapshot, with its schedule for advancing phases'''
    kind: str                       # red_light | stop_sign
    trigger_zone: OrientedBox
    stop_line_arclength: float      # relative to the start of the route window
    phase_schedule: tuple = ()      # ((phase, steps), ...) cyclic, lights only
    phase_offset: int = 0
    stop_served: bool = False

    def phase_at(self, world_step):
        return phase_from_schedule(self.kind, self.phase_schedule, world_step + self.phase_offset)


def phase_from_schedule(kind, schedule, step):
    if kind == 'stop_sign' or len(schedule) == 0:
        return 'stop' if kind == 'stop_sign' else 'green'
    cycle = sum(steps for _, steps in schedule)
    k = step % cycle
    for phase, steps in schedule:
        if k < steps:
            return phase
        k -= steps
    return schedule[-1][0]


@dataclass(frozen=True)
class ZoneFlags:
    stop_required: bool
    go_required: bool
    signal_phases: tuple


@dataclass(frozen=True)
class CounterfactualSnapshot:
    ego: BicycleState
    agents: tuple                   # DecayAgentState, vehicles then pedestrians
    agent_kinds: tuple              # 'vehicle' | 'pedestrian'
    route_window: Polyline
    route_offset: float             # arclength of the window start on the full route
    lanes: tuple                    # nearby Lane strips
    controls: tuple                 # ControlSnapshot
    zone_flags: ZoneFlags
    scenario_tags: tuple
    world_step: int
    ego_half_length: float = 2.25
    ego_half_width: float = 0.95
    ego_center_offset: float = 1.35
    v_stop: float = 0.1
    v_go: float = 2.0
    offroute_threshold: float = 4.0
    offroad_margin: float = 0.5
    collision_min_speed: float = 0.1
    version: int = field(default=RECORD_VERSION)


# ---------------------------------------------------------------- JSON records
def _pose_dict(pose):
    return {'x': pose.x, 'y': pose.y, 'yaw': pose.yaw}


def _box_dict(box):
    return {'center': _pose_dict(box.center), 'half_length': box.half_length,
            'half_width': box.half_width}


def _box_from(d):
    return OrientedBox(Pose2D(**d['center']), d['half_length'], d['half_width'])


def snapshot_to_dict(snapshot, candidates=None):
    d = {'version': snapshot.version,
         'ego': {'pose': _pose_dict(snapshot.ego.pose), 'speed': snapshot.ego.speed,
                 'wheelbase': snapshot.ego.wheelbase},
         'agents': [{'box': _box_dict(a.box), 'speed': a.speed, 'held_accel': a.held_accel,
                     'held_steer': a.held_steer, 'on_connector': a.on_connector,
                     'step_index': a.step_index, 'wheelbase': a.wheelbase}
                    for a in snapshot.agents],
         'agent_kinds': list(snapshot.agent_kinds),
         'route_window': snapshot.route_window.points.tolist(),
         'route_offset': snapshot.route_offset,
         'lanes': [{'lane_id': l.lane_id, 'kind': l.kind, 'width': l.width,
                    'centerline': l.centerline.points.tolist()} for l in snapshot.lanes],
         'controls': [{'kind': c.kind, 'trigger_zone': _box_dict(c.trigger_zone),
                       'stop_line_arclength': c.stop_line_arclength,
                       'phase_schedule': [list(p) for p in c.phase_schedule],
                       'phase_offset': c.phase_offset, 'stop_served': c.stop_served}
                      for c in snapshot.controls],
         'zone_flags': {'stop_required': snapshot.zone_flags.stop_required,
                        'go_required': snapshot.zone_flags.go_required,
                        'signal_phases': list(snapshot.zone_flags.signal_phases)},
         'scenario_tags': list(snapshot.scenario_tags),
         'world_step': snapshot.world_step}
    for key in ('ego_half_length', 'ego_half_width', 'ego_center_offset', 'v_stop', 'v_go',
                'offroute_threshold', 'offroad_margin', 'collision_min_speed'):
        d[key] = getattr(snapshot, key)
    if candidates is not None:
        d['candidates'] = {'trajectories': candidates.trajectories.tolist(),
                           'logits': candidates.logits.tolist(),
                           'valid_mask': candidates.valid_mask.tolist()}
    return d


def snapshot_from_dict(d):
    '''returns (snapshot, candidates or None)'''
    if d.get('version') != RECORD_VERSION:
        raise ValueError('unsupported snapshot record version: ' + str(d.get('version')))
    ego = BicycleState(Pose2D(**d['ego']['pose']), d['ego']['speed'], d['ego']['wheelbase'])
    agents = tuple(DecayAgentState(_box_from(a['box']), a['speed'], a['held_accel'], a['held_steer'],
                                   a['on_connector'], a['step_index'], a['wheelbase'])
                   for a in d['agents'])
    lanes = tuple(Lane(l['lane_id'], l['kind'], Polyline(l['centerline']), l['width'])
                  for l in d['lanes'])
    controls = tuple(ControlSnapshot(c['kind'], _box_from(c['trigger_zone']), c['stop_line_arclength'],
                                     tuple((p, int(s)) for p, s in c['phase_schedule']),
                                     c['phase_offset'], c['stop_served'])
                     for c in d['controls'])
    zf = d['zone_flags']
    extras = {key: d[key] for key in ('ego_half_length', 'ego_half_width', 'ego_center_offset',
                                      'v_stop', 'v_go', 'offroute_threshold', 'offroad_margin',
                                      'collision_min_speed')}
    snapshot = CounterfactualSnapshot(ego, agents, tuple(d['agent_kinds']), Polyline(d['route_window']),
                                      d['route_offset'], lanes, controls,
                                      ZoneFlags(zf['stop_required'], zf['go_required'],
                                                tuple(zf['signal_phases'])),
                                      tuple(d['scenario_tags']), d['world_step'], **extras)
    candidates = None
    if 'candidates' in d:
        c = d['candidates']
        candidates = CandidateSet(np.array(c['trajectories'], dtype=float), c['logits'], c['valid_mask'])
    return snapshot, candidates


def save_records(path, pairs):
    '''write a list of (snapshot, candidates) pairs as a JSON document'''
    doc = {'version': RECORD_VERSION,
           'records': [snapshot_to_dict(s, c) for s, c in pairs]}
    with open(path, 'w') as f:
        json.dump(doc, f)


def load_records(path):
    with open(path, 'r') as f:
        doc = json.load(f)
    if doc.get('version') != RECORD_VERSION:
        raise ValueError('unsupported record file version: ' + str(doc.get('version')))
    return [snapshot_from_dict(d) for d in doc['records']]
