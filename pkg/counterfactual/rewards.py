'''
Reward terms. The counterfactual reward is dense (progress shaped by route,
lane-centre and heading deviations, a signed recovery term and infraction
penalties); the corrective reward is sparse and safety centred.

Every function accepts scalars or equally shaped numpy arrays so the engine
can score all candidates and steps in one call.
'''
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CounterfactualRewardConfig:
    p_min: float = 0.0
    p_max: float = 1.2
    w_prog: float = 8.0
    w_g: float = 3.0
    w_c: float = 0.8
    w_h: float = 2.0
    eta_min: float = 0.0
    d_clip: float = 0.1
    delta_g_rec: float = 0.08
    delta_c_rec: float = 0.08
    k_g: float = 0.4
    k_c: float = 0.2
    k_h: float = 0.4
    c_clip: float = 0.5
    a_rec: float = 0.5
    b_rec: float = 0.5
    lambda_offroad: float = 1.5
    lambda_opp: float = 0.1
    lambda_offroute: float = 1.5
    lambda_emg: float = 1.0
    lambda_coll: float = 40.0
    lambda_red: float = 40.0
    lambda_stop: float = 40.0
    alpha_v: float = 0.5
    v_ref: float = 5.0
    nu_min: float = 0.0
    nu_max: float = 1.0

    def __post_init__(self):
        if not self.p_max > self.p_min:
            raise ValueError('p_max must exceed p_min')
        lambdas = (self.lambda_offroad, self.lambda_opp, self.lambda_offroute, self.lambda_emg,
                   self.lambda_coll, self.lambda_red, self.lambda_stop)
        if min(lambdas) < 0:
            raise ValueError('reward penalty weights must be non-negative')
        if self.nu_min > self.nu_max:
            raise ValueError('nu_min must not exceed nu_max')
        if self.v_ref <= 0:
            raise ValueError('v_ref must be positive')


@dataclass(frozen=True)
class CorrectiveRewardConfig:
    lambda_offroad: float = 0.5
    lambda_emg: float = 0.2
    lambda_offroute: float = 0.5
    lambda_red: float = 2.0
    lambda_stop: float = 2.0
    lambda_coll: float = 5.0
    v_stop: float = 0.1
    v_go: float = 2.0

    def __post_init__(self):
        lambdas = (self.lambda_offroad, self.lambda_emg, self.lambda_offroute, self.lambda_red,
                   self.lambda_stop, self.lambda_coll)
        if min(lambdas) < 0:
            raise ValueError('corrective penalty weights must be non-negative')
        if not self.v_stop < self.v_go:
            raise ValueError('v_stop must be below v_go')


@dataclass(frozen=True)
class DeviationSample:
    d_g: object
    d_c: object
    d_h: object
    delta_d_g: object = 0.0
    delta_d_c: object = 0.0
    delta_d_h: object = 0.0

    def __post_init__(self):
        for name in ('d_g', 'd_c', 'd_h'):
            if np.any(np.asarray(getattr(self, name)) < 0):
                raise ValueError(name + ' must be a non-negative magnitude')

    @classmethod
    def between(cls, prev, curr):
        '''deviation at `curr` with deltas relative to `prev`, both (d_g, d_c, d_h)'''
        return cls(curr[0], curr[1], curr[2], np.subtract(curr[0], prev[0]),
                   np.subtract(curr[1], prev[1]), np.subtract(curr[2], prev[2]))


def progress_term(delta_p, cfg):
    return np.clip(delta_p, cfg.p_min, cfg.p_max) / cfg.p_max


def efficiency_multiplier(d, cfg):
    eta = np.exp(-cfg.w_g*np.asarray(d.d_g)) * np.exp(-cfg.w_c*np.asarray(d.d_c)) * np.exp(-cfg.w_h*np.asarray(d.d_h))
    return np.maximum(eta, cfg.eta_min)


def recovery_reward(d, progress_hat, cfg):
    dg = np.clip(d.delta_d_g, -cfg.d_clip, cfg.d_clip)
    dc = np.clip(d.delta_d_c, -cfg.d_clip, cfg.d_clip)
    dh = np.clip(d.delta_d_h, -cfg.d_clip, cfg.d_clip)
    # heading is gated on the centreline threshold
    c = (np.where(np.asarray(d.d_g) > cfg.delta_g_rec, cfg.k_g*(-dg), 0.0)
         + np.where(np.asarray(d.d_c) > cfg.delta_c_rec, cfg.k_c*(-dc), 0.0)
         + np.where(np.asarray(d.d_h) > cfg.delta_c_rec, cfg.k_h*(-dh), 0.0))
    return np.clip(c, -cfg.c_clip, cfg.c_clip) * (cfg.a_rec + cfg.b_rec*np.asarray(progress_hat))


def collision_multiplier(v, cfg):
    if np.any(np.asarray(v) < 0):
        raise ValueError('collision speed must be non-negative')
    return 1.0 + cfg.alpha_v*np.clip(np.asarray(v, dtype=float)/cfg.v_ref, cfg.nu_min, cfg.nu_max)


def _flag(flags, name):
    return np.asarray(getattr(flags, name), dtype=float)


def counterfactual_step_reward(progress_hat, eta, r_rec, flags, first_collision, v, cfg):
    '''
    flags: anything with offroad / opposite_lane / offroute / emergency_lane
    attributes (InfractionFlags or the engine's per-step flag arrays).
    the collision penalty is charged only where first_collision is set
    '''
    collision = np.asarray(first_collision, dtype=float)
    return (cfg.w_prog*np.asarray(progress_hat)*np.asarray(eta) + np.asarray(r_rec)
            - cfg.lambda_offroad*_flag(flags, 'offroad')
            - cfg.lambda_opp*_flag(flags, 'opposite_lane')
            - cfg.lambda_offroute*_flag(flags, 'offroute')
            - cfg.lambda_emg*_flag(flags, 'emergency_lane')
            - cfg.lambda_coll*collision_multiplier(v, cfg)*collision)


def stop_indicator(flags):
    '''stop-line violations and lingering in a go-required zone share one indicator'''
    return np.logical_or(flags.stop_violation, flags.go_blocked_slow)


def corrective_reward(flags, cfg):
    r = (- cfg.lambda_offroad*_flag(flags, 'offroad')
         - cfg.lambda_emg*_flag(flags, 'emergency_lane')
         - cfg.lambda_offroute*_flag(flags, 'offroute')
         - cfg.lambda_red*_flag(flags, 'red_violation')
         - cfg.lambda_stop*np.asarray(stop_indicator(flags), dtype=float)
         - cfg.lambda_coll*_flag(flags, 'collision'))
    return float(r) if np.ndim(r) == 0 else r


def closed_loop_reward(delta_p, deviation, flags, cfg):
    '''
    dense reward on an executed transition: the counterfactual step reward
    with the red and stop penalties charged on every violating step
    '''
    progress_hat = progress_term(delta_p, cfg)
    eta = efficiency_multiplier(deviation, cfg)
    r_rec = recovery_reward(deviation, progress_hat, cfg)
    r = counterfactual_step_reward(progress_hat, eta, r_rec, flags, flags.collision,
                                   flags.collision_speed, cfg)
    r = r - cfg.lambda_red*_flag(flags, 'red_violation') - cfg.lambda_stop*np.asarray(stop_indicator(flags), dtype=float)
    return float(r) if np.ndim(r) == 0 else r
