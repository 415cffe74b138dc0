'''
The trainable scoring head: a shared linear scorer over candidate features
with a masked softmax, its analytic score function, the EMA teacher and
checkpoint I/O.

Checkpoint files (torch.save dicts):
    weights        float64 tensor (F,)
    version        int, policy update counter
    vocab_hash     sha256 of the VocabConfig the weights were trained for
    vocab_config   the VocabConfig fields
    teacher        float64 tensor (F,) or absent
    critic         float64 tensor or absent (PPO value head)
'''
from dataclasses import dataclass, asdict

import numpy as np
import torch
from scipy.special import logsumexp

import sys; sys.path.append('..'); sys.path.append('.')


def _frozen(weights):
    w = np.array(weights, dtype=float).reshape(-1)
    if not np.all(np.isfinite(w)):
        raise ValueError('policy weights must be finite')
    w.setflags(write=False)
    return w


@dataclass(frozen=True)
class PolicyParams:
    weights: np.ndarray
    version: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'weights', _frozen(self.weights))

    def __eq__(self, other):
        return (isinstance(other, PolicyParams) and self.version == other.version
                and np.array_equal(self.weights, other.weights))

    __hash__ = None


@dataclass(frozen=True)
class TeacherParams:
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'weights', _frozen(self.weights))

    def __eq__(self, other):
        return isinstance(other, TeacherParams) and np.array_equal(self.weights, other.weights)

    __hash__ = None


@dataclass(frozen=True)
class PolicyDistribution:
    probabilities: np.ndarray
    log_probabilities: np.ndarray
    valid_mask: np.ndarray


def _weights(params):
    return params.weights if hasattr(params, 'weights') else np.asarray(params, dtype=float)


def masked_log_softmax(logits, valid_mask):
    '''log-probabilities over valid entries (-inf elsewhere), batched over leading dims'''
    logits = np.asarray(logits, dtype=float)
    valid_mask = np.asarray(valid_mask, dtype=bool)
    if not np.all(np.any(valid_mask, axis=-1)):
        raise ValueError('policy distribution needs at least one valid candidate')
    masked = np.where(valid_mask, logits, -np.inf)
    lse = logsumexp(masked, axis=-1, keepdims=True)
    return np.where(valid_mask, masked - lse, -np.inf)


def policy_distribution(params, features, valid_mask, temperature=1.0):
    if temperature <= 0:
        raise ValueError('temperature must be positive')
    logits = np.asarray(features, dtype=float) @ _weights(params) / temperature
    log_p = masked_log_softmax(logits, valid_mask)
    probs = np.where(valid_mask, np.exp(log_p), 0.0)
    return PolicyDistribution(probs, log_p, np.asarray(valid_mask, dtype=bool))


def sample_candidate(dist, rng):
    probs = dist.probabilities / np.sum(dist.probabilities)
    index = int(rng.choice(len(probs), p=probs))
    return index, float(dist.log_probabilities[index])


def greedy_candidate(dist):
    return int(np.argmax(np.where(dist.valid_mask, dist.probabilities, -1.0)))


def logprob_grad(params, features, valid_mask, index):
    '''gradient of log pi(index) w.r.t. the weights: f[index] - E_pi[f]'''
    valid_mask = np.asarray(valid_mask, dtype=bool)
    if not valid_mask[index]:
        raise ValueError('candidate ' + str(index) + ' is masked invalid')
    features = np.asarray(features, dtype=float)
    dist = policy_distribution(params, features, valid_mask)
    return features[index] - dist.probabilities @ features


def ema_update(teacher, online, m):
    if not 0 <= m < 1:
        raise ValueError('EMA momentum must lie in [0, 1), got ' + str(m))
    return TeacherParams(m*teacher.weights + (1 - m)*online.weights)


# ---------------------------------------------------------------- checkpoints
def save_checkpoint(path, params, vocab_config, teacher=None, critic=None):
    checkpoint = {'weights': torch.tensor(params.weights, dtype=torch.float64),
                  'version': int(params.version),
                  'vocab_hash': vocab_config.hash(),
                  'vocab_config': {k: list(v) if isinstance(v, tuple) else v
                                   for k, v in asdict(vocab_config).items()}}
    if teacher is not None:
        checkpoint['teacher'] = torch.tensor(teacher.weights, dtype=torch.float64)
    if critic is not None:
        checkpoint['critic'] = torch.tensor(np.asarray(critic), dtype=torch.float64)
    torch.save(checkpoint, path)


def load_checkpoint(path, vocab_config=None):
    '''returns (PolicyParams, TeacherParams or None, critic weights or None, stored vocab hash)'''
    checkpoint = torch.load(path, map_location='cpu')
    if vocab_config is not None and checkpoint['vocab_hash'] != vocab_config.hash():
        raise ValueError('checkpoint/vocab hash mismatch: ' + str(path) + ' was trained for vocabulary '
                         + checkpoint['vocab_hash'][:12] + ', current vocabulary is ' + vocab_config.hash()[:12])
    params = PolicyParams(checkpoint['weights'].numpy(), int(checkpoint['version']))
    teacher = TeacherParams(checkpoint['teacher'].numpy()) if 'teacher' in checkpoint else None
    critic = checkpoint['critic'].numpy() if 'critic' in checkpoint else None
    return params, teacher, critic, checkpoint['vocab_hash']
