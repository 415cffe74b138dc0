'''
Losses and advantages for fine-tuning the linear scorer. Every loss returns
its scalar value together with the analytic gradient w.r.t. the scorer
weights (and the critic weights for the PPO value term).

Batches are dense arrays: features (B, G, F), masks (B, G), selected (B,)
indices and behaviour log-probabilities (B,).
'''
from dataclasses import dataclass, replace

import numpy as np

import sys; sys.path.append('..'); sys.path.append('.')
from policy.scorer import masked_log_softmax


@dataclass(frozen=True)
class ObjectiveWeights:
    lambda_cp: float = 1.0
    lambda_gr: float = 0.5
    beta_r: float = 0.5
    beta_f: float = 0.1
    eps_clip: float = 0.2
    dual_clip_c: float = 2.0
    gamma_c: float = 0.8
    S_gr: float = 8.0
    A_min: float = -1.0
    A_max: float = 1.0
    gamma: float = 0.98
    lambda_gae: float = 0.95
    eps_v: float = 2.0
    kappa_v: float = 2.0
    eps_norm: float = 1e-8
    dual_clip: bool = True

    def __post_init__(self):
        if not self.dual_clip_c > 1:
            raise ValueError('dual_clip_c must exceed 1')
        if not 0 < self.eps_clip < 1:
            raise ValueError('eps_clip must lie in (0, 1)')
        if not self.A_min < self.A_max:
            raise ValueError('A_min must be below A_max')
        if not (0 < self.gamma < 1 and 0 < self.gamma_c < 1):
            raise ValueError('gamma and gamma_c must lie in (0, 1)')
        if self.S_gr <= 0:
            raise ValueError('S_gr must be positive')


def distributions(weights, features, masks):
    '''(probabilities, log-probabilities, probability-weighted mean features) per state'''
    log_p = masked_log_softmax(np.asarray(features) @ weights, masks)
    probs = np.where(masks, np.exp(log_p), 0.0)
    mean_feat = np.einsum('bg,bgf->bf', probs, features)
    return probs, log_p, mean_feat


def _check_aligned(features, masks, other, name):
    if features.shape[:2] != masks.shape or other.shape != masks.shape:
        raise ValueError(name + ' shape ' + str(other.shape) + ' does not match candidate mask shape '
                         + str(masks.shape))


# ---------------------------------------------------------------- proxy term
def loss_cp(weights, features, masks, advantages):
    '''negative expected group advantage under the current policy, exact over candidates'''
    features, masks, advantages = np.asarray(features, float), np.asarray(masks, bool), np.asarray(advantages, float)
    _check_aligned(features, masks, advantages, 'advantages')
    probs, _, mean_feat = distributions(weights, features, masks)
    advantages = np.where(masks, advantages, 0.0)
    b = len(features)
    loss = -np.sum(probs*advantages) / b
    centered = features - mean_feat[:, None, :]
    grad = -np.einsum('bg,bgf->f', probs*advantages, centered) / b
    return float(loss), grad


# ---------------------------------------------------------------- grounded term
def corrective_advantage(r_gr, done_mask, weights):
    r_gr = np.asarray(r_gr, dtype=float)
    done_mask = np.asarray(done_mask, dtype=float)
    returns = np.zeros_like(r_gr)
    running = 0.0
    for t in reversed(range(len(r_gr))):
        running = r_gr[t] + weights.gamma_c*done_mask[t]*running
        returns[t] = running
    return np.clip(returns/weights.S_gr, weights.A_min, weights.A_max)


def dual_clip_surrogate(rho, a_hat, weights):
    rho = np.asarray(rho, dtype=float)
    a_hat = np.asarray(a_hat, dtype=float)
    if np.any(rho <= 0):
        raise ValueError('probability ratio must be positive')
    eps = weights.eps_clip
    clipped = np.minimum(rho*a_hat, np.clip(rho, 1 - eps, 1 + eps)*a_hat)
    if not weights.dual_clip:
        out = clipped
    else:
        out = np.where(a_hat < 0, np.maximum(clipped, weights.dual_clip_c*a_hat), clipped)
    return float(out) if out.ndim == 0 else out


def selected_ratio(weights, features, masks, selected, behavior_logp):
    '''probability ratio of the selected candidates and their score vectors f_sel - E_pi[f]'''
    probs, log_p, mean_feat = distributions(weights, features, masks)
    rows = np.arange(len(selected))
    rho = np.exp(log_p[rows, selected] - np.asarray(behavior_logp, dtype=float))
    score = np.asarray(features)[rows, selected] - mean_feat
    return rho, score


def _surrogate_active(rho, a_hat, weights, dual_clip):
    '''mask of samples whose surrogate is on an unclipped branch (boundaries count as unclipped)'''
    eps = weights.eps_clip
    positive = (a_hat >= 0) & (rho <= 1 + eps)
    if dual_clip:
        negative = (a_hat < 0) & (rho >= 1 - eps) & (rho <= weights.dual_clip_c)
    else:
        negative = (a_hat < 0) & (rho >= 1 - eps)
    return positive | negative


def loss_gr(weights, features, masks, selected, behavior_logp, a_hat, objective):
    '''dual-clipped surrogate on executed selections; returns (loss, grad, stats)'''
    a_hat = np.asarray(a_hat, dtype=float)
    rho, score = selected_ratio(weights, features, masks, selected, behavior_logp)
    u = dual_clip_surrogate(rho, a_hat, objective)
    active = _surrogate_active(rho, a_hat, objective, objective.dual_clip)
    b = len(a_hat)
    loss = -np.sum(u) / b
    grad = -np.einsum('b,bf->f', np.where(active, a_hat*rho, 0.0), score) / b
    eps = objective.eps_clip
    stats = {'mean_rho': float(np.mean(rho)),
             'clip_frac': float(np.mean((rho < 1 - eps) | (rho > 1 + eps)))}
    return float(loss), grad, stats


# ---------------------------------------------------------------- self-distillation
def kl_losses(weights, teacher_weights, features, masks):
    '''
    exact reverse KL(pi || teacher) and forward KL(teacher || pi) over the
    candidate set, averaged over states; returns ((L_dist, grad), (L_KL, grad))
    '''
    features, masks = np.asarray(features, float), np.asarray(masks, bool)
    p, lp, mean_p = distributions(weights, features, masks)
    q, lq, mean_q = distributions(teacher_weights, features, masks)
    if np.any((p > 0) & (q <= 0)):
        raise ValueError('support mismatch: teacher assigns zero probability to a candidate the policy supports')
    b = len(features)
    log_ratio = np.where(masks, lp - lq, 0.0)
    reverse = np.sum(p*log_ratio) / b
    centered = features - mean_p[:, None, :]
    reverse_grad = np.einsum('bg,bgf->f', p*log_ratio, centered) / b
    forward = np.sum(q*(-log_ratio)) / b
    forward_grad = np.sum(mean_p - mean_q, axis=0) / b
    return (float(reverse), reverse_grad), (float(forward), forward_grad)


def loss_craft_total(components, weights):
    '''
    components maps 'cp', 'gr', 'dist', 'kl' to (loss, grad); missing terms
    count as zero
    '''
    scales = {'cp': weights.lambda_cp, 'gr': weights.lambda_gr, 'dist': weights.beta_r, 'kl': weights.beta_f}
    total, grad = 0.0, None
    for name, scale in scales.items():
        if name not in components:
            continue
        loss, g = components[name]
        total += scale*loss
        grad = scale*np.asarray(g) if grad is None else grad + scale*np.asarray(g)
    return total, grad


def grpo_loss(weights, teacher_weights, features, masks, advantages, objective):
    '''group-proxy update without the grounded term; returns (loss, grad, component losses)'''
    cp = loss_cp(weights, features, masks, advantages)
    dist, kl = kl_losses(weights, teacher_weights, features, masks)
    total, grad = loss_craft_total({'cp': cp, 'dist': dist, 'kl': kl},
                                   replace(objective, lambda_cp=1.0, lambda_gr=0.0))
    return total, grad, {'loss_cp': cp[0], 'loss_dist': dist[0], 'loss_kl': kl[0]}


def distill_loss(weights, teacher_weights, features, masks, objective):
    dist, kl = kl_losses(weights, teacher_weights, features, masks)
    total, grad = loss_craft_total({'dist': dist, 'kl': kl}, objective)
    return total, grad, {'loss_dist': dist[0], 'loss_kl': kl[0]}


# ---------------------------------------------------------------- baselines
def gae_advantages(rewards, values, term_mask, done_mask, weights, next_values=None):
    '''
    generalised advantage estimates. Without next_values, values carries one
    extra trailing bootstrap entry and V(s_{t+1}) = values[t+1]
    '''
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    t_len = len(rewards)
    if next_values is None:
        if len(values) != t_len + 1:
            raise ValueError('values must have length T+1 when next_values is omitted')
        next_values = values[1:]
        values = values[:-1]
    next_values = np.asarray(next_values, dtype=float)
    term_mask = np.asarray(term_mask, dtype=float)
    done_mask = np.asarray(done_mask, dtype=float)
    deltas = rewards + weights.gamma*term_mask*next_values - values
    advantages = np.zeros(t_len)
    running = 0.0
    for t in reversed(range(t_len)):
        running = deltas[t] + weights.gamma*weights.lambda_gae*done_mask[t]*running
        advantages[t] = running
    return advantages, advantages + values


def clipped_surrogate_loss(weights, features, masks, selected, behavior_logp, advantages, objective):
    '''standard clipped surrogate on the selected candidate (no dual clip)'''
    advantages = np.asarray(advantages, dtype=float)
    rho, score = selected_ratio(weights, features, masks, selected, behavior_logp)
    eps = objective.eps_clip
    u = np.minimum(rho*advantages, np.clip(rho, 1 - eps, 1 + eps)*advantages)
    active = _surrogate_active(rho, advantages, objective, dual_clip=False)
    b = len(advantages)
    loss = -np.sum(u) / b
    grad = -np.einsum('b,bf->f', np.where(active, advantages*rho, 0.0), score) / b
    stats = {'mean_rho': float(np.mean(rho)),
             'clip_frac': float(np.mean((rho < 1 - eps) | (rho > 1 + eps)))}
    return float(loss), grad, stats


def smooth_l1(x):
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5*x**2, ax - 0.5), np.where(ax < 1.0, x, np.sign(x))


def value_loss(critic_weights, state_features, old_values, returns, objective):
    '''clipped SmoothL1 value loss, elementwise max of clipped and unclipped branches'''
    x = np.asarray(state_features, dtype=float)
    values = x @ critic_weights
    old_values = np.asarray(old_values, dtype=float)
    returns = np.asarray(returns, dtype=float)
    moved = values - old_values
    clipped_values = old_values + np.clip(moved, -objective.eps_v, objective.eps_v)
    l_un, d_un = smooth_l1(values - returns)
    l_cl, d_cl = smooth_l1(clipped_values - returns)
    use_clipped = l_cl > l_un
    inside = np.abs(moved) <= objective.eps_v
    d = np.where(use_clipped, np.where(inside, d_cl, 0.0), d_un)
    b = len(returns)
    loss = np.sum(np.maximum(l_un, l_cl)) / b
    grad = x.T @ d / b
    return float(loss), grad


def ppo_losses(weights, critic_weights, features, masks, selected, behavior_logp, advantages,
               state_features, old_values, returns, objective):
    '''policy and value terms of PPO; the critic gradient belongs to the kappa_v parameter group'''
    policy_loss, policy_grad, stats = clipped_surrogate_loss(weights, features, masks, selected,
                                                             behavior_logp, advantages, objective)
    v_loss, v_grad = value_loss(critic_weights, state_features, old_values, returns, objective)
    return {'policy_loss': policy_loss, 'policy_grad': policy_grad,
            'value_loss': v_loss, 'value_grad': v_grad, **stats}


def reinforcepp_advantages(rewards, done_mask, weights):
    rewards = np.asarray(rewards, dtype=float)
    done_mask = np.asarray(done_mask, dtype=float)
    returns = np.zeros_like(rewards)
    running = 0.0
    for t in reversed(range(len(rewards))):
        running = rewards[t] + weights.gamma*done_mask[t]*running
        returns[t] = running
    return (returns - returns.mean()) / (returns.std() + weights.eps_norm)
