'''
The real closed-loop environment: scenario definitions, reactive background
traffic, traffic controls, the world step, infraction detection and the
termination rules. The lane/route/zone helpers at the bottom are shared with
the counterfactual engine so both worlds measure deviations the same way.
'''
import math
from dataclasses import dataclass, replace, field

import numpy as np

import sys; sys.path.append('..'); sys.path.append('.')
from sim.geometry import (Pose2D, OrientedBox, Polyline, box_corners, sat_overlap_corners,
                          project_points, transform_to_local, transform_to_global)
from sim.dynamics import (BicycleState, ControlInput, DecayAgentState, PidGains, PidMemory,
                          TrackReference, bicycle_step, pid_track,
                          steer_for_curvature, ACCEL_MIN, ACCEL_MAX)
from counterfactual.records import (ControlSnapshot, ZoneFlags, CounterfactualSnapshot,
                                    phase_from_schedule)

TERMINAL_REASONS = ('none', 'collision', 'route_complete', 'timeout', 'offroute_exceeded')
PEDESTRIAN_HALF_SIZE = 0.3


@dataclass(frozen=True)
class WorldConfig:
    dt: float = 0.1
    v_stop: float = 0.1
    v_go: float = 2.0
    offroute_threshold: float = 4.0
    offroad_margin: float = 0.5
    offroute_persistence: int = 20
    clear_path_length: float = 10.0
    sensing_radius: float = 50.0
    collision_min_speed: float = 0.1
    route_complete_tolerance: float = 1.0
    route_window_length: float = 60.0
    ego_half_length: float = 2.25
    ego_half_width: float = 0.95
    ego_center_offset: float = 1.35
    # car following
    idm_accel: float = 1.5
    idm_comfort_decel: float = 2.0
    idm_time_headway: float = 1.5
    idm_min_gap: float = 3.0
    leader_lateral: float = 1.75

    def __post_init__(self):
        if not self.v_stop < self.v_go:
            raise ValueError('v_stop must be below v_go')
        if self.dt <= 0:
            raise ValueError('dt must be positive')


@dataclass(frozen=True)
class TrafficControl:
    kind: str                       # red_light | stop_sign
    trigger_zone: OrientedBox
    stop_line_arclength: float      # along the route
    phase_schedule: tuple = ()      # ((phase, steps), ...)
    phase_offset_range: tuple = (0, 0)

    def __post_init__(self):
        if self.kind not in ('red_light', 'stop_sign'):
            raise ValueError('unknown traffic control kind: ' + str(self.kind))
        if self.kind == 'red_light' and len(self.phase_schedule) == 0:
            raise ValueError('red_light needs a phase_schedule')


@dataclass(frozen=True)
class AgentSpec:
    path: Polyline
    s0: float
    speed: float
    behavior: str = 'reactive'      # reactive | scripted
    desired_speed: float = None
    half_length: float = 2.25
    half_width: float = 0.95
    s0_range: tuple = None
    speed_range: tuple = None
    on_connector: bool = False

    def __post_init__(self):
        if self.behavior not in ('reactive', 'scripted'):
            raise ValueError('unknown agent behavior: ' + str(self.behavior))


@dataclass(frozen=True)
class PedestrianEvent:
    spawn_step: int
    crossing: Polyline
    speed: float
    spawn_step_range: tuple = None
    speed_range: tuple = None


@dataclass(frozen=True)
class Scenario:
    name: str
    lanes: tuple
    route: Polyline
    traffic_controls: tuple = ()
    agents_init: tuple = ()
    pedestrian_events: tuple = ()
    max_steps: int = 250
    ego_speed: float = 0.0
    ego_speed_range: tuple = None
    seed_domain: tuple = ()
    tags: tuple = ()


@dataclass(frozen=True)
class AgentState:
    agent_id: int
    path: Polyline
    s: float
    speed: float
    desired_speed: float
    behavior: str
    half_length: float
    half_width: float
    accel: float = 0.0
    steer: float = 0.0
    on_connector: bool = False
    exited: bool = False

    @property
    def pose(self):
        p = self.path.point_at(self.s)
        return Pose2D(p[0], p[1], float(self.path.heading_at(self.s)))

    @property
    def box(self):
        return OrientedBox(self.pose, self.half_length, self.half_width)

    @property
    def velocity(self):
        yaw = self.pose.yaw
        return np.array([self.speed*math.cos(yaw), self.speed*math.sin(yaw)])


@dataclass(frozen=True)
class PedestrianState:
    ped_id: int
    crossing: Polyline
    s: float
    speed: float

    @property
    def pose(self):
        p = self.crossing.point_at(self.s)
        return Pose2D(p[0], p[1], float(self.crossing.heading_at(self.s)))

    @property
    def box(self):
        return OrientedBox(self.pose, PEDESTRIAN_HALF_SIZE, PEDESTRIAN_HALF_SIZE)

    @property
    def velocity(self):
        yaw = self.pose.yaw
        return np.array([self.speed*math.cos(yaw), self.speed*math.sin(yaw)])


@dataclass(frozen=True)
class WorldState:
    scenario: Scenario
    config: WorldConfig
    ego: BicycleState
    agents: tuple
    pedestrians: tuple              # active pedestrians
    pending_pedestrians: tuple      # (spawn_step, PedestrianState) not yet on the road
    signal_phases: tuple
    phase_offsets: tuple
    stop_served: tuple
    step_index: int
    route_progress: float
    rng_state: dict = field(repr=False)
    offroute_streak: int = 0
    terminal: bool = False
    terminal_reason: str = 'none'

    @property
    def ego_box(self):
        return ego_footprint(self.ego.pose, self.config)


@dataclass(frozen=True)
class InfractionFlags:
    collision: bool = False
    offroad: bool = False
    offroute: bool = False
    opposite_lane: bool = False
    emergency_lane: bool = False
    red_violation: bool = False
    stop_violation: bool = False
    go_blocked_slow: bool = False
    collision_speed: float = 0.0

    def __post_init__(self):
        if self.collision_speed > 0 and not self.collision:
            raise ValueError('collision_speed > 0 requires collision')

    def any(self):
        return (self.collision or self.offroad or self.offroute or self.opposite_lane
                or self.emergency_lane or self.red_violation or self.stop_violation
                or self.go_blocked_slow)


@dataclass(frozen=True)
class StepOutcome:
    next_state: WorldState
    flags: InfractionFlags
    terminal: bool
    terminal_reason: str = 'none'

    def __post_init__(self):
        if self.terminal_reason not in TERMINAL_REASONS:
            raise ValueError('unknown terminal reason: ' + str(self.terminal_reason))
        if (self.terminal_reason != 'none') != self.terminal:
            raise ValueError('terminal_reason must be set iff terminal')


# ---------------------------------------------------------------- footprints
def ego_footprint(pose, config):
    return OrientedBox(pose.forward(config.ego_center_offset), config.ego_half_length,
                       config.ego_half_width)


def ego_corners_arrays(x, y, yaw, half_length, half_width, center_offset):
    '''batched ego footprint corners from rear-axle poses'''
    cx = x + center_offset*np.cos(yaw)
    cy = y + center_offset*np.sin(yaw)
    return box_corners(cx, cy, yaw, np.full(np.shape(x), half_length), np.full(np.shape(x), half_width))


# ---------------------------------------------------------------- reset
def validate_scenario(scenario):
    if scenario.max_steps <= 0:
        raise ValueError('scenario ' + scenario.name + ': max_steps must be > 0')
    if len(scenario.lanes) == 0:
        raise ValueError('scenario ' + scenario.name + ': no lanes')
    for i, vertex in enumerate(scenario.route.points):
        inside = False
        for lane in scenario.lanes:
            _, lateral, _, dist = project_points([vertex], [0.0], lane.centerline)
            if dist[0] <= lane.width/2 + 1e-9:
                inside = True
                break
        if not inside:
            raise ValueError('scenario ' + scenario.name + ': route vertex ' + str(i) + ' '
                             + str(vertex.tolist()) + ' is not within half a lane width of any centerline')
    for control in scenario.traffic_controls:
        if not (0 <= control.stop_line_arclength <= scenario.route.total_length):
            raise ValueError('scenario ' + scenario.name + ': stop line outside the route')


def _draw(rng, value, value_range, integer=False):
    if value_range is None:
        return value
    lo, hi = value_range
    if integer:
        return int(rng.integers(int(lo), int(hi) + 1))
    return float(rng.uniform(lo, hi))


def reset(scenario, seed, config=None):
    '''deterministic initial world for (scenario, seed); draws follow the scenario's seed domain'''
    if config is None:
        config = WorldConfig()
    validate_scenario(scenario)
    rng = np.random.default_rng(int(seed) % 2**64)
    # draw order: ego, controls, agents, pedestrians
    ego_speed = _draw(rng, scenario.ego_speed, scenario.ego_speed_range)
    offsets = tuple(_draw(rng, c.phase_offset_range[0], c.phase_offset_range, integer=True)
                    for c in scenario.traffic_controls)
    agents = []
    for i, spec in enumerate(scenario.agents_init):
        speed = _draw(rng, spec.speed, spec.speed_range)
        s0 = _draw(rng, spec.s0, spec.s0_range)
        desired = speed if spec.desired_speed is None else spec.desired_speed
        agents.append(AgentState(i, spec.path, s0, speed, desired, spec.behavior,
                                 spec.half_length, spec.half_width, on_connector=spec.on_connector))
    pending = []
    for i, event in enumerate(scenario.pedestrian_events):
        spawn = _draw(rng, event.spawn_step, event.spawn_step_range, integer=True)
        speed = _draw(rng, event.speed, event.speed_range)
        pending.append((spawn, PedestrianState(i, event.crossing, 0.0, speed)))
    pedestrians = tuple(p for spawn, p in pending if spawn <= 0)
    pending = tuple((spawn, p) for spawn, p in pending if spawn > 0)
    route = scenario.route
    ego = BicycleState(Pose2D(route.points[0, 0], route.points[0, 1], float(route.heading_at(0.0))),
                       ego_speed)
    phases = tuple(phase_from_schedule(c.kind, c.phase_schedule, off)
                   for c, off in zip(scenario.traffic_controls, offsets))
    return WorldState(scenario, config, ego, tuple(agents), pedestrians, pending, phases, offsets,
                      tuple(False for _ in scenario.traffic_controls), 0, 0.0,
                      rng.bit_generator.state)


# ---------------------------------------------------------------- background traffic
def idm_acceleration(speed, desired_speed, gap, leader_speed, config):
    '''
    intelligent-driver car following. gap is bumper to bumper (inf for a free
    road); at or below the minimum gap the agent brakes at full authority
    '''
    desired_speed = max(desired_speed, 0.1)
    free = config.idm_accel*(1.0 - (speed/desired_speed)**4)
    if not np.isfinite(gap):
        return float(np.clip(free, ACCEL_MIN, ACCEL_MAX))
    if gap <= config.idm_min_gap:
        return ACCEL_MIN
    closing = speed - leader_speed
    desired_gap = config.idm_min_gap + max(0.0, speed*config.idm_time_headway
                                           + speed*closing/(2*math.sqrt(config.idm_accel*config.idm_comfort_decel)))
    accel = free - config.idm_accel*(desired_gap/gap)**2
    return float(np.clip(accel, ACCEL_MIN, ACCEL_MAX))


def _obstacles_for(agent, world):
    '''centres, yaws, speeds and half extents of everything that can block an agent'''
    rows = []
    ego_box = world.ego_box
    rows.append((ego_box.center, world.ego.speed, ego_box.half_length, ego_box.half_width))
    for other in world.agents:
        if other.agent_id == agent.agent_id or other.exited:
            continue
        rows.append((other.pose, other.speed, other.half_length, other.half_width))
    for ped in world.pedestrians:
        rows.append((ped.pose, ped.speed, PEDESTRIAN_HALF_SIZE, PEDESTRIAN_HALF_SIZE))
    return rows


def leader_gap(agent, world):
    '''(gap, leader speed along the path) of the closest obstacle ahead on the agent's path'''
    cfg = world.config
    rows = _obstacles_for(agent, world)
    if len(rows) == 0:
        return math.inf, 0.0
    centers = np.array([[p.x, p.y] for p, _, _, _ in rows])
    yaws = np.array([p.yaw for p, _, _, _ in rows])
    speeds = np.array([v for _, v, _, _ in rows])
    hls = np.array([hl for _, _, hl, _ in rows])
    hws = np.array([hw for _, _, _, hw in rows])
    s, lateral, herr, _ = project_points(centers, yaws, agent.path, s_min=agent.s,
                                         s_max=agent.s + cfg.sensing_radius)
    ds = s - agent.s
    extent_along = hls*np.abs(np.cos(herr)) + hws*np.abs(np.sin(herr))
    extent_across = hls*np.abs(np.sin(herr)) + hws*np.abs(np.cos(herr))
    blocking = (np.abs(lateral) < cfg.leader_lateral + extent_across) & (ds > 0) & (ds <= cfg.sensing_radius)
    if not np.any(blocking):
        return math.inf, 0.0
    gaps = np.where(blocking, ds - agent.half_length - extent_along, np.inf)
    k = int(np.argmin(gaps))
    return float(gaps[k]), float(max(0.0, speeds[k]*math.cos(herr[k])))


def path_curvature(path, s, ds=1.0):
    h0 = path.heading_at(s - ds)
    h1 = path.heading_at(s + ds)
    return float(np.mod(h1 - h0 + np.pi, 2*np.pi) - np.pi) / (2*ds)


def reactive_agent_policy(agent, world):
    '''car-following control for a background agent; scripted agents hold their speed'''
    steer = steer_for_curvature(path_curvature(agent.path, agent.s))
    if agent.behavior == 'scripted':
        return ControlInput.saturated(steer, 0.0)
    gap, leader_speed = leader_gap(agent, world)
    accel = idm_acceleration(agent.speed, agent.desired_speed, gap, leader_speed, world.config)
    return ControlInput.saturated(steer, accel)


def _advance_agent(agent, u, dt):
    if agent.exited:
        return agent
    s = agent.s + agent.speed*dt
    speed = max(0.0, agent.speed + u.accel*dt)
    exited = s >= agent.path.total_length
    return replace(agent, s=min(s, agent.path.total_length), speed=speed, accel=u.accel,
                   steer=u.steer, exited=exited)


# ---------------------------------------------------------------- shared lane / route / zone helpers
def nearest_lane(lanes, points, headings):
    '''
    nearest lane strip per point: (lane index, signed lateral offset,
    heading error, distance). Oncoming and emergency strips lose exact ties.
    '''
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(points)
    dists = np.empty((len(lanes), n))
    laterals = np.empty((len(lanes), n))
    herrs = np.empty((len(lanes), n))
    for i, lane in enumerate(lanes):
        _, laterals[i], herrs[i], dists[i] = project_points(points, headings, lane.centerline)
    tie_break = np.array([1e-9 if lane.kind in ('opposite', 'emergency') else 0.0 for lane in lanes])
    idx = np.argmin(dists + tie_break[:, None], axis=0)
    cols = np.arange(n)
    return idx, laterals[idx, cols], herrs[idx, cols], dists[idx, cols]


def lane_flags(lanes, points, headings, offroad_margin):
    '''offroad / opposite / emergency indicators plus the lane-centre deviation'''
    idx, lateral, herr, dist = nearest_lane(lanes, points, headings)
    widths = np.array([lane.width for lane in lanes])[idx]
    kinds = np.array([lane.kind for lane in lanes])[idx]
    offroad = dist > widths/2 + offroad_margin
    opposite = (kinds == 'opposite') & (np.abs(herr) > np.pi/2) & ~offroad
    emergency = (kinds == 'emergency') & ~offroad
    return offroad, opposite, emergency, np.abs(lateral)


def zone_membership(zone, points):
    local = transform_to_local(points, zone.center)
    return (np.abs(local[:, 0]) <= zone.half_length) & (np.abs(local[:, 1]) <= zone.half_width)


def stop_required(kind, phase, served):
    if kind == 'red_light':
        return phase == 'red'
    return not served


def clear_path_ahead(ego_pose, obstacle_corners, config, lane_width=3.5):
    '''no obstacle footprint intersects the clear-path box ahead of the ego'''
    if len(obstacle_corners) == 0:
        return True
    front = ego_pose.forward(config.ego_center_offset + config.ego_half_length
                             + config.clear_path_length/2)
    box = OrientedBox(front, config.clear_path_length/2, lane_width/2)
    return not bool(np.any(sat_overlap_corners(box.corners()[None], obstacle_corners)))


def _obstacle_arrays(world):
    '''corners (K, 4, 2) and velocities (K, 2) of all active agents and pedestrians'''
    boxes, vels = [], []
    for agent in world.agents:
        if not agent.exited:
            boxes.append(agent.box.corners())
            vels.append(agent.velocity)
    for ped in world.pedestrians:
        boxes.append(ped.box.corners())
        vels.append(ped.velocity)
    if len(boxes) == 0:
        return np.zeros((0, 4, 2)), np.zeros((0, 2))
    return np.array(boxes), np.array(vels)


def route_projection(route, pose, progress, config):
    '''projection of a pose onto the route, searched near the current progress'''
    s, lateral, herr, _ = project_points([pose.xy], [pose.yaw], route, s_min=progress - 2.0,
                                         s_max=progress + 20.0)
    return float(s[0]), float(lateral[0]), float(herr[0])


def measure_deviations(state):
    '''(route lateral, lane-centre lateral, heading error) magnitudes of the ego'''
    pose = state.ego.pose
    _, lateral, herr = route_projection(state.scenario.route, pose, state.route_progress, state.config)
    _, lane_lat, _, _ = nearest_lane(state.scenario.lanes, [pose.xy], [pose.yaw])
    return abs(lateral), float(abs(lane_lat[0])), abs(herr)


# ---------------------------------------------------------------- infractions and stepping
def detect_infractions(prev, next):
    cfg = next.config
    scenario = next.scenario
    pose = next.ego.pose
    speed = next.ego.speed

    collision, collision_speed = False, 0.0
    corners, vels = _obstacle_arrays(next)
    if len(corners) > 0:
        overlap = sat_overlap_corners(next.ego_box.corners()[None], corners)
        ego_vel = np.array([speed*math.cos(pose.yaw), speed*math.sin(pose.yaw)])
        rel = np.linalg.norm(vels - ego_vel[None], axis=1)
        hits = overlap & (rel >= cfg.collision_min_speed)
        if np.any(hits):
            collision, collision_speed = True, float(np.max(rel[hits]))

    offroad, opposite, emergency, _ = lane_flags(scenario.lanes, [pose.xy], [pose.yaw], cfg.offroad_margin)
    _, route_lat, _ = route_projection(scenario.route, pose, next.route_progress, cfg)
    offroute = abs(route_lat) > cfg.offroute_threshold

    red, stop, go_zone = False, False, False
    for i, control in enumerate(scenario.traffic_controls):
        inside = bool(zone_membership(control.trigger_zone, [pose.xy])[0])
        required = stop_required(control.kind, next.signal_phases[i], next.stop_served[i])
        crossed = prev.route_progress < control.stop_line_arclength <= next.route_progress
        violated = required and ((inside and speed > cfg.v_stop) or crossed)
        if control.kind == 'red_light':
            red = red or violated
        else:
            stop = stop or violated
        go_zone = go_zone or (inside and not required)
    go_blocked = False
    if go_zone and speed < cfg.v_go:
        go_blocked = clear_path_ahead(pose, corners, cfg)
    return InfractionFlags(collision, bool(offroad[0]), bool(offroute), bool(opposite[0]),
                           bool(emergency[0]), red, stop, go_blocked, collision_speed)


def step_world(state, ego_control):
    if state.terminal:
        raise RuntimeError('episode finished')
    cfg = state.config
    scenario = state.scenario
    ego = bicycle_step(state.ego, ego_control, cfg.dt)
    # agents respond to the current world simultaneously
    controls = [reactive_agent_policy(a, state) for a in state.agents]
    agents = tuple(_advance_agent(a, u, cfg.dt) for a, u in zip(state.agents, controls))
    step_index = state.step_index + 1
    pedestrians = [replace(p, s=p.s + p.speed*cfg.dt) for p in state.pedestrians]
    pedestrians = [p for p in pedestrians if p.s < p.crossing.total_length]
    pedestrians += [p for spawn, p in state.pending_pedestrians if spawn <= step_index]
    pending = tuple((spawn, p) for spawn, p in state.pending_pedestrians if spawn > step_index)
    s, _, _ = route_projection(scenario.route, ego.pose, state.route_progress, cfg)
    progress = max(state.route_progress, s)
    phases = tuple(phase_from_schedule(c.kind, c.phase_schedule, step_index + off)
                   for c, off in zip(scenario.traffic_controls, state.phase_offsets))
    served = []
    for i, control in enumerate(scenario.traffic_controls):
        inside = bool(zone_membership(control.trigger_zone, [ego.pose.xy])[0])
        served.append(state.stop_served[i] or (control.kind == 'stop_sign' and inside
                                               and ego.speed <= cfg.v_stop))
    next_state = replace(state, ego=ego, agents=agents, pedestrians=tuple(pedestrians),
                         pending_pedestrians=pending, signal_phases=phases, stop_served=tuple(served),
                         step_index=step_index, route_progress=progress)
    flags = detect_infractions(state, next_state)
    streak = state.offroute_streak + 1 if flags.offroute else 0
    if flags.collision:
        reason = 'collision'
    elif progress >= scenario.route.total_length - cfg.route_complete_tolerance:
        reason = 'route_complete'
    elif streak >= cfg.offroute_persistence:
        reason = 'offroute_exceeded'
    elif step_index >= scenario.max_steps:
        reason = 'timeout'
    else:
        reason = 'none'
    terminal = reason != 'none'
    next_state = replace(next_state, offroute_streak=streak, terminal=terminal, terminal_reason=reason)
    return StepOutcome(next_state, flags, terminal, reason)


# ---------------------------------------------------------------- counterfactual snapshot
def snapshot_for_counterfactual(state, candidates=None):
    '''
    freeze everything the counterfactual engine needs at a visited state.
    agents and pedestrians within the sensing radius become decay agents
    holding their current actions. `candidates` is accepted for symmetry
    with the stored record and is not consulted.
    '''
    if state.terminal:
        raise RuntimeError('episode finished')
    cfg = state.config
    scenario = state.scenario
    ego_xy = state.ego.pose.xy
    agents, kinds = [], []
    for agent in state.agents:
        if agent.exited or np.linalg.norm(agent.pose.xy - ego_xy) > cfg.sensing_radius:
            continue
        agents.append(DecayAgentState(agent.box, agent.speed, agent.accel, agent.steer,
                                      agent.on_connector))
        kinds.append('vehicle')
    for ped in state.pedestrians:
        if np.linalg.norm(ped.pose.xy - ego_xy) > cfg.sensing_radius:
            continue
        agents.append(DecayAgentState(ped.box, ped.speed, 0.0, 0.0))
        kinds.append('pedestrian')
    window = scenario.route.window(state.route_progress, cfg.route_window_length)
    lanes = tuple(lane for lane in scenario.lanes
                  if project_points([ego_xy], [0.0], lane.centerline)[3][0] <= cfg.sensing_radius)
    if len(lanes) == 0:
        lanes = tuple(scenario.lanes)
    controls = []
    stop_zone, go_zone = False, False
    for i, control in enumerate(scenario.traffic_controls):
        controls.append(ControlSnapshot(control.kind, control.trigger_zone,
                                        control.stop_line_arclength - state.route_progress,
                                        tuple(control.phase_schedule), state.phase_offsets[i],
                                        state.stop_served[i]))
        inside = bool(zone_membership(control.trigger_zone, [ego_xy])[0])
        required = stop_required(control.kind, state.signal_phases[i], state.stop_served[i])
        stop_zone = stop_zone or (inside and required)
        go_zone = go_zone or (inside and not required)
    return CounterfactualSnapshot(
        ego=state.ego, agents=tuple(agents), agent_kinds=tuple(kinds), route_window=window,
        route_offset=state.route_progress, lanes=lanes, controls=tuple(controls),
        zone_flags=ZoneFlags(stop_zone, go_zone, tuple(state.signal_phases)),
        scenario_tags=(scenario.name,) + tuple(scenario.tags), world_step=state.step_index,
        ego_half_length=cfg.ego_half_length, ego_half_width=cfg.ego_half_width,
        ego_center_offset=cfg.ego_center_offset, v_stop=cfg.v_stop, v_go=cfg.v_go,
        offroute_threshold=cfg.offroute_threshold, offroad_margin=cfg.offroad_margin,
        collision_min_speed=cfg.collision_min_speed)


# ---------------------------------------------------------------- executing a selected candidate
def follow_trajectory(state, trajectory, steps, gains=None):
    '''
    track an ego-frame trajectory (H_traj, 3) with the PID controller for up
    to `steps` world steps; stops early on termination. returns the list of
    StepOutcomes
    '''
    gains = PidGains() if gains is None else gains
    trajectory = np.asarray(trajectory, dtype=float)
    if trajectory.size == 0:
        raise ValueError('degenerate candidate')
    pts = transform_to_global(trajectory[:, :2], state.ego.pose)
    reference = TrackReference(np.concatenate([state.ego.pose.xy[None], pts], axis=0),
                               np.concatenate([[state.ego.speed], trajectory[:, 2]]))
    memory = PidMemory()
    outcomes = []
    for _ in range(steps):
        control, memory = pid_track(state.ego, reference, gains, memory, state.config.dt)
        outcome = step_world(state, control)
        outcomes.append(outcome)
        state = outcome.next_state
        if outcome.terminal:
            break
    return outcomes
