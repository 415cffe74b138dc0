'''
Fine-tuning loop: collect with a frozen policy, evaluate the stored groups
counterfactually, then run a few optimiser epochs on the buffer and move the
EMA teacher once per round. The same loop drives the baselines (grpo, ppo,
reinforcepp, distill) by routing to their losses.
'''
import os
import math

import numpy as np
import torch
import torch.optim as optim
from tqdm import tqdm

import sys; sys.path.append('..'); sys.path.append('.')
from sim.scenarios import load_scenarios
from policy.scorer import PolicyParams, TeacherParams, ema_update
from policy.pretrain import pretrain_policy
from trainers.objectives import (loss_cp, loss_gr, kl_losses, loss_craft_total, grpo_loss, distill_loss,
                                 corrective_advantage, gae_advantages, ppo_losses, clipped_surrogate_loss,
                                 reinforcepp_advantages, selected_ratio)
from trainers.rollouts import collect_rollouts, evaluate_buffer_counterfactuals
from trainers.utils import run_saver, METRICS_FILE

# loss components logged per method
METHOD_COMPONENTS = {'craft': ('loss_cp', 'loss_gr', 'loss_dist', 'loss_kl'),
                     'grpo': ('loss_cp', 'loss_dist', 'loss_kl'),
                     'distill': ('loss_dist', 'loss_kl'),
                     'ppo': ('loss_policy', 'loss_value'),
                     'reinforcepp': ('loss_policy',)}
NEEDS_COUNTERFACTUAL = ('craft', 'grpo')


def lr_at(round_index, total_rounds, cfg):
    '''cosine decay from lr_initial (round 0) to lr_min (round total_rounds)'''
    if round_index < 0 or round_index > total_rounds:
        raise ValueError('round ' + str(round_index) + ' outside [0, ' + str(total_rounds) + ']')
    if total_rounds == 0:
        return cfg.lr_initial
    cos = 0.5*(1 + math.cos(math.pi*round_index/total_rounds))
    return cfg.lr_min + (cfg.lr_initial - cfg.lr_min)*cos


def buffer_arrays(buffer):
    '''stack a buffer into the dense arrays the losses take'''
    t = buffer.transitions
    arrays = {'features': np.stack([x.features for x in t]),
              'masks': np.stack([x.candidates.valid_mask for x in t]),
              'selected': np.array([x.selected_index for x in t]),
              'behavior_logp': np.array([x.behavior_log_probability for x in t]),
              'behavior_probs': np.stack([x.behavior_probabilities for x in t]),
              'r_gr': np.array([x.r_gr for x in t]),
              'r_cl': np.array([x.r_cl for x in t]),
              'u_done': np.array([x.u_done for x in t], dtype=float),
              'u_term': np.array([x.u_term for x in t], dtype=float)}
    if buffer.evaluated:
        arrays['cp_advantages'] = np.stack([x.cp_advantages for x in t])
        arrays['cp_returns'] = np.stack([x.cp_returns for x in t])
    return arrays


def _stats(values, mask=None):
    values = np.asarray(values, dtype=float)
    if mask is not None:
        values = values[np.asarray(mask, dtype=bool)]
    if values.size == 0:
        return {'adv_mean': float('nan'), 'adv_std': float('nan'), 'adv_min': float('nan'), 'adv_max': float('nan')}
    return {'adv_mean': float(np.mean(values)), 'adv_std': float(np.std(values)),
            'adv_min': float(np.min(values)), 'adv_max': float(np.max(values))}


class trainer():
    def __init__(self, run_config, params, teacher=None, critic=None, saver=None):
        self.run_config = run_config
        self.cfg = run_config.trainer
        self.objective = run_config.objective
        self.method = self.cfg.method
        self.saver = saver
        self.params = params
        self.teacher = TeacherParams(params.weights) if teacher is None else teacher
        critic = np.zeros_like(params.weights) if critic is None else np.asarray(critic, dtype=float)
        self.actor = torch.tensor(np.array(params.weights), dtype=torch.float64, requires_grad=True)
        self.critic = torch.tensor(np.array(critic), dtype=torch.float64, requires_grad=True)
        self.setup()

    def setup(self):
        # optimser: actor group and critic group (critic runs at kappa_v times the actor rate)
        self.optimiser = optim.AdamW([{'params': [self.actor], 'name': 'actor'},
                                      {'params': [self.critic], 'name': 'critic'}],
                                     lr=self.cfg.lr_initial, weight_decay=self.cfg.weight_decay)
        self.set_lr(self.cfg.lr_initial)

    def set_lr(self, lr):
        for group in self.optimiser.param_groups:
            group['lr'] = lr*self.objective.kappa_v if group['name'] == 'critic' else lr

    @property
    def critic_weights(self):
        return self.critic.detach().numpy().copy()

    def apply_gradients(self, actor_grad, critic_grad=None):
        '''clip by global norm and take one AdamW step; returns (norm before, norm after) clipping'''
        self.actor.grad = torch.tensor(np.asarray(actor_grad, dtype=float), dtype=torch.float64)
        self.critic.grad = None
        if critic_grad is not None:
            self.critic.grad = torch.tensor(np.asarray(critic_grad, dtype=float), dtype=torch.float64)
        with_grad = [p for p in (self.actor, self.critic) if p.grad is not None]
        norm = float(torch.nn.utils.clip_grad_norm_(with_grad, self.cfg.grad_clip_norm))
        clipped = float(torch.sqrt(sum(torch.sum(p.grad**2) for p in with_grad)))
        self.optimiser.step()
        self.optimiser.zero_grad(set_to_none=True)
        return norm, clipped

    def prepare_round(self, buffer, arrays):
        '''per-round advantages, fixed across the epochs of the round'''
        prep = {}
        if self.method in NEEDS_COUNTERFACTUAL and not buffer.evaluated:
            raise ValueError('method ' + self.method + ' needs a counterfactually evaluated buffer')
        if self.method == 'craft':
            prep['a_hat'] = corrective_advantage(arrays['r_gr'], arrays['u_done'], self.objective)
        if self.method == 'ppo':
            state_features = np.einsum('bg,bgf->bf', arrays['behavior_probs'], arrays['features'])
            critic = self.critic_weights
            old_values = state_features @ critic
            next_values = np.zeros(len(old_values))
            for i, t in enumerate(buffer.transitions):
                if arrays['u_done'][i] and i + 1 < len(old_values):
                    next_values[i] = old_values[i + 1]
                elif t.bootstrap_features is not None:
                    next_values[i] = (t.bootstrap_probabilities @ t.bootstrap_features) @ critic
            advantages, returns = gae_advantages(arrays['r_cl'], old_values, arrays['u_term'], arrays['u_done'],
                                                 self.objective, next_values=next_values)
            prep.update(state_features=state_features, old_values=old_values, advantages=advantages,
                        returns=returns)
        if self.method == 'reinforcepp':
            prep['advantages'] = reinforcepp_advantages(arrays['r_cl'], arrays['u_done'], self.objective)
        return prep

    def epoch_losses(self, w, arrays, prep):
        '''(total loss, actor grad, critic grad or None, logged components, advantage stats)'''
        F, M = arrays['features'], arrays['masks']
        sel, blogp = arrays['selected'], arrays['behavior_logp']
        teacher = self.teacher.weights
        obj = self.objective
        critic_grad = None
        if self.method == 'craft':
            cp = loss_cp(w, F, M, arrays['cp_advantages'])
            gr_loss, gr_grad, _ = loss_gr(w, F, M, sel, blogp, prep['a_hat'], obj)
            dist, kl = kl_losses(w, teacher, F, M)
            total, grad = loss_craft_total({'cp': cp, 'gr': (gr_loss, gr_grad), 'dist': dist, 'kl': kl}, obj)
            components = {'loss_cp': cp[0], 'loss_gr': gr_loss, 'loss_dist': dist[0], 'loss_kl': kl[0]}
            adv = _stats(arrays['cp_advantages'], M)
        elif self.method == 'grpo':
            total, grad, components = grpo_loss(w, teacher, F, M, arrays['cp_advantages'], obj)
            adv = _stats(arrays['cp_advantages'], M)
        elif self.method == 'distill':
            total, grad, components = distill_loss(w, teacher, F, M, obj)
            adv = _stats([])
        elif self.method == 'ppo':
            out = ppo_losses(w, self.critic_weights, F, M, sel, blogp, prep['advantages'],
                             prep['state_features'], prep['old_values'], prep['returns'], obj)
            total = out['policy_loss'] + out['value_loss']
            grad, critic_grad = out['policy_grad'], out['value_grad']
            components = {'loss_policy': out['policy_loss'], 'loss_value': out['value_loss']}
            adv = _stats(prep['advantages'])
        else:
            total, grad, _ = clipped_surrogate_loss(w, F, M, sel, blogp, prep['advantages'], obj)
            components = {'loss_policy': total}
            adv = _stats(prep['advantages'])
        return total, grad, critic_grad, components, adv

    def train_round(self, buffer, round_index):
        '''
        epochs_per_round passes over the buffer, then one EMA teacher step.
        returns the per-epoch metrics dicts
        '''
        if buffer.policy_version != self.params.version:
            raise ValueError('buffer collected under policy version ' + str(buffer.policy_version)
                             + ' but the trainer holds version ' + str(self.params.version))
        lr = lr_at(round_index, self.cfg.total_rounds, self.cfg)
        self.set_lr(lr)
        arrays = buffer_arrays(buffer)
        prep = self.prepare_round(buffer, arrays)
        eps = self.objective.eps_clip
        metrics = []
        for epoch in tqdm(range(self.cfg.epochs_per_round), desc='epoch', leave=False):
            w = self.actor.detach().numpy().copy()
            total, grad, critic_grad, components, adv = self.epoch_losses(w, arrays, prep)
            finite = np.isfinite(total) and np.all(np.isfinite(grad))
            if critic_grad is not None:
                finite = finite and np.all(np.isfinite(critic_grad))
            if not finite:
                self.abort_round(round_index, epoch, total, components, w)
            rho, _ = selected_ratio(w, arrays['features'], arrays['masks'], arrays['selected'],
                                    arrays['behavior_logp'])
            norm, clipped = self.apply_gradients(grad, critic_grad)
            stats = {'round': round_index, 'epoch': epoch, 'method': self.method,
                     'policy_version': self.params.version, 'lr': lr, 'loss_total': float(total)}
            stats.update({k: float(v) for k, v in components.items()})
            stats.update({'mean_rho': float(np.mean(rho)),
                          'clip_frac': float(np.mean((rho < 1 - eps) | (rho > 1 + eps))),
                          'grad_norm': norm, 'grad_norm_clipped': clipped})
            stats.update(adv)
            metrics.append(stats)
        self.params = PolicyParams(self.actor.detach().numpy().copy(), self.params.version + 1)
        self.teacher = ema_update(self.teacher, self.params, self.cfg.ema_momentum)
        return metrics

    def abort_round(self, round_index, epoch, total, components, weights):
        diagnostic = {'round': round_index, 'epoch': epoch, 'method': self.method,
                      'loss_total': repr(total), 'components': {k: repr(v) for k, v in components.items()},
                      'weights': [repr(x) for x in weights], 'teacher': [repr(x) for x in self.teacher.weights]}
        where = ''
        if self.saver is not None:
            where = ', diagnostic written to ' + self.saver.write_diagnostic(round_index, diagnostic)
        raise FloatingPointError('non-finite loss in round ' + str(round_index) + ' epoch ' + str(epoch) + where)


def _curve_row(round_index, method, buffer):
    episodes = buffer.episodes
    r_gr = np.array([t.r_gr for t in buffer.transitions])
    r_cl = np.array([t.r_cl for t in buffer.transitions])
    cp_return = float('nan')
    if buffer.evaluated:
        cp_return = float(np.mean([np.mean(t.cp_returns[t.candidates.valid_mask]) for t in buffer.transitions]))
    successes = [e['terminal_reason'] == 'route_complete' and e['collisions'] == 0 for e in episodes]
    return {'round': round_index, 'method': method, 'mean_r_gr': float(np.mean(r_gr)),
            'mean_r_cl': float(np.mean(r_cl)), 'mean_cp_return': cp_return,
            'collisions': int(sum(e['collisions'] for e in episodes)),
            'success_fraction': float(np.mean(successes)) if successes else float('nan'),
            'episodes': len(episodes)}


def run_training(run_config, out_dir, params=None):
    '''
    pre-train (unless params are given), then alternate collect, evaluate and
    train_round for total_rounds. returns (final checkpoint path, metrics path)
    '''
    cfg = run_config.trainer
    saver = run_saver(out_dir, run_config)
    scenarios = load_scenarios(run_config.scenarios)
    if params is None:
        params, _ = pretrain_policy(scenarios, run_config.vocab, run_config.world, run_config.pretrain,
                                    seed=run_config.seed)
    teacher = TeacherParams(params.weights)
    path = saver.save_checkpoint('checkpoint_pretrained', params, teacher)
    t = trainer(run_config, params, teacher, saver=saver)
    for k in tqdm(range(cfg.total_rounds), desc='rounds'):
        try:
            seed = int(np.random.SeedSequence([run_config.seed, 2, k]).generate_state(1)[0])
            buffer = collect_rollouts(t.params, scenarios, cfg.buffer_size, seed, run_config.vocab,
                                      run_config.world, run_config.reward_cp, run_config.reward_gr,
                                      cfg.decision_interval, run_config.engine.gains)
            records_file = saver.save_records(k, buffer)
            if cfg.method in NEEDS_COUNTERFACTUAL:
                buffer = evaluate_buffer_counterfactuals(buffer, run_config.reward_cp, run_config.engine,
                                                         cfg.workers, records_file)
            metrics = t.train_round(buffer, k)
            saver.log_training_stats(metrics)
            saver.log_curve(_curve_row(k, cfg.method, buffer))
            critic = t.critic_weights if cfg.method == 'ppo' else None
            path = saver.save_checkpoint('checkpoint_round' + str(k + 1), t.params, t.teacher, critic)
        except Exception as e:
            message = 'round ' + str(k) + ': ' + str(e)
            try:
                error = type(e)(message)
            except Exception:
                error = RuntimeError(message)
            raise error from e
    return path, os.path.join(saver.dir, METRICS_FILE)


if __name__ == '__main__':
    # same surface as `python craftlab.py train ...`
    from craftlab import main
    sys.exit(main(['train'] + sys.argv[1:]))
