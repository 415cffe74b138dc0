'''
Vehicle dynamics shared by the real micro-world and the counterfactual world:
kinematic bicycle integration about the rear axle, the PID trajectory tracker
(the controller kappa that turns a selected trajectory into controls), and the
decay rollout model used for background agents inside counterfactual rollouts.

The array functions (`*_arrays`, `*_batch`) operate on any number of vehicles
at once; the dataclass functions are thin single-vehicle wrappers around them.
'''
import math
from dataclasses import dataclass, replace

import numpy as np

import sys; sys.path.append('..'); sys.path.append('.')
from sim.geometry import Pose2D, OrientedBox, normalize_angle

STEER_MAX = 0.5
ACCEL_MIN = -6.0
ACCEL_MAX = 3.0
DEFAULT_WHEELBASE = 2.7


@dataclass(frozen=True)
class BicycleState:
    pose: Pose2D
    speed: float
    wheelbase: float = DEFAULT_WHEELBASE

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError('speed must be non-negative, got ' + str(self.speed))
        if self.wheelbase <= 0:
            raise ValueError('wheelbase must be positive, got ' + str(self.wheelbase))


@dataclass(frozen=True)
class ControlInput:
    steer: float
    accel: float

    def __post_init__(self):
        if abs(self.steer) > STEER_MAX + 1e-12:
            raise ValueError('steer ' + str(self.steer) + ' outside +-' + str(STEER_MAX))
        if not (ACCEL_MIN - 1e-12 <= self.accel <= ACCEL_MAX + 1e-12):
            raise ValueError('accel ' + str(self.accel) + ' outside ['
                             + str(ACCEL_MIN) + ', ' + str(ACCEL_MAX) + ']')

    @classmethod
    def saturated(cls, steer, accel):
        return cls(float(np.clip(steer, -STEER_MAX, STEER_MAX)),
                   float(np.clip(accel, ACCEL_MIN, ACCEL_MAX)))


@dataclass(frozen=True)
class PidGains:
    lat_kp: float = 0.8
    lat_ki: float = 0.0
    lat_kd: float = 0.3
    lon_kp: float = 1.0
    lon_ki: float = 0.05
    lon_kd: float = 0.0
    lookahead: float = 2.0

    def __post_init__(self):
        gains = (self.lat_kp, self.lat_ki, self.lat_kd, self.lon_kp, self.lon_ki, self.lon_kd)
        if min(gains) < 0:
            raise ValueError('PID gains must be non-negative, got ' + str(gains))
        if self.lookahead <= 0:
            raise ValueError('lookahead must be positive, got ' + str(self.lookahead))


@dataclass(frozen=True)
class PidMemory:
    lat_integral: float = 0.0
    lat_prev_error: float = 0.0
    lon_integral: float = 0.0
    lon_prev_error: float = 0.0
    started: bool = False


@dataclass(frozen=True)
class DecayAgentState:
    box: OrientedBox
    speed: float
    held_accel: float
    held_steer: float
    on_connector: bool = False
    step_index: int = 0
    wheelbase: float = DEFAULT_WHEELBASE

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError('agent speed must be non-negative, got ' + str(self.speed))


@dataclass(frozen=True)
class DecayParams:
    decision_window: int = 5
    ramp_steps: int = 10
    connector_ramp_steps: int = 5
    full_brake: float = -4.0


@dataclass(frozen=True)
class TrackReference:
    '''global reference waypoints (N, 2) with per-point target speeds (N,)'''
    points: np.ndarray
    speeds: np.ndarray

    def __post_init__(self):
        points = np.array(self.points, dtype=float).reshape(-1, 2)
        speeds = np.array(self.speeds, dtype=float).reshape(-1)
        if len(points) == 0:
            raise ValueError('degenerate candidate')
        if len(points) != len(speeds):
            raise ValueError('reference points and speeds differ in length')
        points.setflags(write=False)
        speeds.setflags(write=False)
        object.__setattr__(self, 'points', points)
        object.__setattr__(self, 'speeds', speeds)


# ---------------------------------------------------------------- bicycle model
def bicycle_step_arrays(x, y, yaw, speed, steer, accel, wheelbase, dt):
    '''explicit Euler step of the rear-axle kinematic bicycle, batched'''
    new_x = x + speed*np.cos(yaw)*dt
    new_y = y + speed*np.sin(yaw)*dt
    new_yaw = normalize_angle(yaw + speed/wheelbase*np.tan(steer)*dt)
    new_speed = np.maximum(0.0, speed + accel*dt)
    return new_x, new_y, new_yaw, new_speed


def bicycle_step(state, u, dt):
    if dt <= 0:
        raise ValueError('dt must be positive, got ' + str(dt))
    x, y, yaw, v = bicycle_step_arrays(state.pose.x, state.pose.y, state.pose.yaw,
                                       state.speed, u.steer, u.accel, state.wheelbase, dt)
    return BicycleState(Pose2D(float(x), float(y), float(yaw)), float(v), state.wheelbase)


# ---------------------------------------------------------------- PID tracker
def _reference_errors_batch(x, y, yaw, ref_points, ref_speeds, ref_valid, lookahead):
    '''
    signed cross-track error of the lookahead point and the target speed at the
    vehicle's projection, for N vehicles each with its own reference (N, P, 2).
    references whose points are all coincident give zero cross-track error.
    '''
    n, p = ref_points.shape[:2]
    la_x = x + lookahead*np.cos(yaw)
    la_y = y + lookahead*np.sin(yaw)
    starts = ref_points[:, :-1, :]
    d = ref_points[:, 1:, :] - starts
    seg_len = np.linalg.norm(d, axis=-1)
    seg_ok = (seg_len > 1e-9) & ref_valid[:, 1:] & ref_valid[:, :-1]
    safe_len = np.where(seg_ok, seg_len, 1.0)
    unit = d / safe_len[..., None]

    def project(px, py):
        rel = np.stack([px, py], axis=-1)[:, None, :] - starts
        t = np.clip(np.einsum('npd,npd->np', rel, unit), 0.0, safe_len)
        foot = starts + unit*t[..., None]
        dist = np.linalg.norm(np.stack([px, py], axis=-1)[:, None, :] - foot, axis=-1)
        dist = np.where(seg_ok, dist, np.inf)
        best = np.argmin(dist, axis=1)
        rows = np.arange(n)
        lateral = (unit[rows, best, 0]*rel[rows, best, 1] - unit[rows, best, 1]*rel[rows, best, 0])
        frac = t[rows, best] / safe_len[rows, best]
        return best, lateral, frac

    any_seg = np.any(seg_ok, axis=1)
    _, cross_track, _ = project(la_x, la_y)
    cross_track = np.where(any_seg, cross_track, 0.0)
    best, _, frac = project(x, y)
    rows = np.arange(n)
    v0 = ref_speeds[rows, best]
    v1 = ref_speeds[rows, np.minimum(best + 1, p - 1)]
    target_speed = np.where(any_seg, v0 + (v1 - v0)*frac, ref_speeds[:, -1])
    return cross_track, target_speed


def pid_track_batch(x, y, yaw, speed, ref_points, ref_speeds, ref_valid, gains, memory, dt):
    '''
    one PID control step for N vehicles. `memory` is a dict of arrays
    (lat_integral, lat_prev_error, lon_integral, lon_prev_error, started)
    and is returned updated, never modified in place
    '''
    cross_track, target_speed = _reference_errors_batch(x, y, yaw, ref_points, ref_speeds,
                                                        ref_valid, gains.lookahead)
    speed_error = target_speed - speed
    started = memory['started']
    lat_integral = memory['lat_integral'] + cross_track*dt
    lon_integral = memory['lon_integral'] + speed_error*dt
    lat_deriv = np.where(started, (cross_track - memory['lat_prev_error'])/dt, 0.0)
    lon_deriv = np.where(started, (speed_error - memory['lon_prev_error'])/dt, 0.0)
    # left-positive error, so steer against it
    steer = -(gains.lat_kp*cross_track + gains.lat_ki*lat_integral + gains.lat_kd*lat_deriv)
    accel = gains.lon_kp*speed_error + gains.lon_ki*lon_integral + gains.lon_kd*lon_deriv
    steer = np.clip(steer, -STEER_MAX, STEER_MAX)
    accel = np.clip(accel, ACCEL_MIN, ACCEL_MAX)
    new_memory = {'lat_integral': lat_integral,
                  'lat_prev_error': cross_track,
                  'lon_integral': lon_integral,
                  'lon_prev_error': speed_error,
                  'started': np.ones_like(started, dtype=bool)}
    return steer, accel, new_memory


def empty_pid_memory(n):
    return {'lat_integral': np.zeros(n), 'lat_prev_error': np.zeros(n),
            'lon_integral': np.zeros(n), 'lon_prev_error': np.zeros(n),
            'started': np.zeros(n, dtype=bool)}


def pid_track(state, reference, gains, pid_memory=None, dt=0.1):
    '''single-vehicle PID step: returns (ControlInput, updated PidMemory)'''
    if pid_memory is None:
        pid_memory = PidMemory()
    memory = {'lat_integral': np.array([pid_memory.lat_integral]),
              'lat_prev_error': np.array([pid_memory.lat_prev_error]),
              'lon_integral': np.array([pid_memory.lon_integral]),
              'lon_prev_error': np.array([pid_memory.lon_prev_error]),
              'started': np.array([pid_memory.started])}
    pts = reference.points
    if len(pts) == 1:
        pts = np.repeat(pts, 2, axis=0)
        speeds = np.repeat(reference.speeds, 2)
    else:
        speeds = reference.speeds
    steer, accel, memory = pid_track_batch(np.array([state.pose.x]), np.array([state.pose.y]),
                                           np.array([state.pose.yaw]), np.array([state.speed]),
                                           pts[None], speeds[None], np.ones((1, len(pts)), dtype=bool),
                                           gains, memory, dt)
    new_memory = PidMemory(float(memory['lat_integral'][0]), float(memory['lat_prev_error'][0]),
                           float(memory['lon_integral'][0]), float(memory['lon_prev_error'][0]),
                           True)
    return ControlInput.saturated(steer[0], accel[0]), new_memory


def track_trajectory_batch(x0, y0, yaw0, v0, wheelbase, ref_points, ref_speeds, ref_valid,
                           horizon, dt, gains):
    '''
    track N references for `horizon` steps. returns arrays (N, horizon+1) of
    x, y, yaw, speed with column 0 equal to the initial states
    '''
    if horizon < 1:
        raise ValueError('horizon must be >= 1, got ' + str(horizon))
    n = len(x0)
    xs = np.zeros((n, horizon + 1))
    ys, yaws, vs = np.zeros_like(xs), np.zeros_like(xs), np.zeros_like(xs)
    xs[:, 0], ys[:, 0], yaws[:, 0], vs[:, 0] = x0, y0, yaw0, v0
    memory = empty_pid_memory(n)
    for t in range(horizon):
        steer, accel, memory = pid_track_batch(xs[:, t], ys[:, t], yaws[:, t], vs[:, t],
                                               ref_points, ref_speeds, ref_valid, gains, memory, dt)
        xs[:, t+1], ys[:, t+1], yaws[:, t+1], vs[:, t+1] = bicycle_step_arrays(
            xs[:, t], ys[:, t], yaws[:, t], vs[:, t], steer, accel, wheelbase, dt)
    return xs, ys, yaws, vs


def track_trajectory(initial, trajectory, horizon, dt=0.1, gains=None):
    '''
    apply pid_track then bicycle_step for `horizon` virtual steps; returns
    horizon+1 BicycleStates with element 0 the initial state
    '''
    if gains is None:
        gains = PidGains()
    if not isinstance(trajectory, TrackReference):
        trajectory = np.asarray(trajectory, dtype=float)
        if trajectory.size == 0:
            raise ValueError('degenerate candidate')
        trajectory = TrackReference(trajectory[:, :2], trajectory[:, 2])
    pts, speeds = trajectory.points, trajectory.speeds
    if len(pts) == 1:
        pts, speeds = np.repeat(pts, 2, axis=0), np.repeat(speeds, 2)
    xs, ys, yaws, vs = track_trajectory_batch(
        np.array([initial.pose.x]), np.array([initial.pose.y]), np.array([initial.pose.yaw]),
        np.array([initial.speed]), initial.wheelbase, pts[None], speeds[None],
        np.ones((1, len(pts)), dtype=bool), horizon, dt, gains)
    states = [initial]
    for t in range(1, horizon + 1):
        states.append(BicycleState(Pose2D(xs[0, t], ys[0, t], yaws[0, t]), float(vs[0, t]),
                                   initial.wheelbase))
    return states


# ---------------------------------------------------------------- decay rollout
def decay_accel(held_accel, step_index, on_connector, params):
    '''
    acceleration of the decay model at a virtual step (batched): held for the
    decision window, then throttle fades out linearly while braking blends
    from the held deceleration to full_brake
    '''
    held_accel = np.asarray(held_accel, dtype=float)
    step_index = np.asarray(step_index)
    ramp = np.where(on_connector, params.connector_ramp_steps, params.ramp_steps)
    into_ramp = step_index - params.decision_window + 1
    frac = np.clip(into_ramp / ramp, 0.0, 1.0)
    throttle = np.maximum(held_accel, 0.0) * (1.0 - frac)
    braking = (1.0 - frac)*np.minimum(held_accel, 0.0) + frac*params.full_brake
    decayed = throttle + braking
    return np.where(step_index < params.decision_window, held_accel, decayed)


def decay_rollout_step(agent, dt, decision_window=5, ramp_steps=10, connector_ramp_steps=5,
                       full_brake=-4.0):
    if min(ramp_steps, connector_ramp_steps) < 1:
        raise ValueError('ramp parameters must be >= 1')
    params = DecayParams(decision_window, ramp_steps, connector_ramp_steps, full_brake)
    accel = float(decay_accel(agent.held_accel, agent.step_index, agent.on_connector, params))
    pose = agent.box.center
    x, y, yaw, v = bicycle_step_arrays(pose.x, pose.y, pose.yaw, agent.speed, agent.held_steer,
                                       accel, agent.wheelbase, dt)
    return replace(agent, box=agent.box.moved_to(Pose2D(float(x), float(y), float(yaw))),
                   speed=float(v), step_index=agent.step_index + 1)


def decay_rollout_batch(x, y, yaw, speed, held_accel, held_steer, on_connector, wheelbase,
                        horizon, dt, params):
    '''agent futures for `horizon` steps, arrays (A, horizon+1)'''
    a = len(x)
    xs = np.zeros((a, horizon + 1))
    ys, yaws, vs = np.zeros_like(xs), np.zeros_like(xs), np.zeros_like(xs)
    xs[:, 0], ys[:, 0], yaws[:, 0], vs[:, 0] = x, y, yaw, speed
    for t in range(horizon):
        accel = decay_accel(held_accel, np.full(a, t), on_connector, params)
        xs[:, t+1], ys[:, t+1], yaws[:, t+1], vs[:, t+1] = bicycle_step_arrays(
            xs[:, t], ys[:, t], yaws[:, t], vs[:, t], held_steer, accel, wheelbase, dt)
    return xs, ys, yaws, vs


def steer_for_curvature(curvature, wheelbase=DEFAULT_WHEELBASE):
    return float(np.clip(math.atan(wheelbase*curvature), -STEER_MAX, STEER_MAX))
