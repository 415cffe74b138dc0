'''
Small enumerable MDPs with tabular softmax policies, where every expectation
over states and candidates is an exact sum.

Conventions:
    P       (S, A, S) transition kernel
    R       (S, A) expected reward
    mask    (S, A) which candidates exist in each state
    theta   (S, A) logits of the tabular softmax policy
Gradients are taken w.r.t. theta and flattened to S*A. "Score expectations"
are E_{s~d, tau~pi}[grad log pi(tau|s) * table(s, tau)] under the normalised
discounted visitation d, which equals (1 - gamma) times grad J.
'''
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

MAX_STATES = 200
MAX_CANDIDATES = 10


@dataclass(frozen=True)
class EnumerableMDP:
    P: np.ndarray
    R: np.ndarray
    gamma: float
    mu0: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        R = np.asarray(self.R, dtype=float)
        mu0 = np.asarray(self.mu0, dtype=float)
        mask = np.ones(R.shape, dtype=bool) if self.mask is None else np.asarray(self.mask, dtype=bool)
        s, a = R.shape
        if P.shape != (s, a, s):
            raise ValueError('kernel shape ' + str(P.shape) + ' does not match rewards ' + str(R.shape))
        if s > MAX_STATES or a > MAX_CANDIDATES:
            raise ValueError('enumerable MDPs hold at most ' + str(MAX_STATES) + ' states and '
                             + str(MAX_CANDIDATES) + ' candidates per state')
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=2) - 1.0)[mask], initial=0.0) > 1e-12:
            raise ValueError('non-stochastic kernel: every row must be a probability distribution')
        if np.any(mu0 < 0) or abs(mu0.sum() - 1.0) > 1e-12:
            raise ValueError('initial distribution must sum to 1')
        if not np.all(mask.any(axis=1)):
            raise ValueError('every state needs at least one candidate')
        if not 0 <= self.gamma < 1:
            raise ValueError('gamma must lie in [0, 1)')
        for name, value in (('P', P), ('R', R), ('mu0', mu0), ('mask', mask)):
            object.__setattr__(self, name, value)

    @property
    def n_states(self):
        return self.R.shape[0]

    @property
    def n_candidates(self):
        return self.R.shape[1]


def random_mdp(rng, n_states=5, n_candidates=3, gamma=0.9, reward_scale=1.0):
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_candidates))
    R = reward_scale*rng.uniform(-1.0, 1.0, size=(n_states, n_candidates))
    mu0 = rng.dirichlet(np.ones(n_states))
    return EnumerableMDP(P, R, gamma, mu0)


def bandit_mdp(rewards, gamma=0.0):
    '''single absorbing state whose candidates pay `rewards`'''
    rewards = np.asarray(rewards, dtype=float)
    return EnumerableMDP(np.ones((1, len(rewards), 1)), rewards[None], gamma, np.ones(1))


def softmax_policy(mdp, theta):
    theta = np.asarray(theta, dtype=float).reshape(mdp.R.shape)
    logits = np.where(mdp.mask, theta, -np.inf)
    return np.where(mdp.mask, np.exp(logits - logsumexp(logits, axis=1, keepdims=True)), 0.0)


def _policy_kernel(mdp, pi):
    return np.einsum('sa,sat->st', pi, mdp.P), np.sum(pi*mdp.R, axis=1)


def solve_values(mdp, pi):
    '''exact (V, Q) of policy table pi by a linear solve'''
    P_pi, r_pi = _policy_kernel(mdp, pi)
    V = linalg.solve(np.eye(mdp.n_states) - mdp.gamma*P_pi, r_pi)
    Q = mdp.R + mdp.gamma*mdp.P @ V
    return V, Q


def solve_real_advantage(mdp, pi):
    '''A = Q - V, zero on missing candidates'''
    V, Q = solve_values(mdp, pi)
    return np.where(mdp.mask, Q - V[:, None], 0.0)


def visitation_measure(mdp, pi):
    '''normalised discounted state visitation (1 - gamma) sum_t gamma^t Pr(s_t = s)'''
    P_pi, _ = _policy_kernel(mdp, pi)
    d = (1 - mdp.gamma)*linalg.solve((np.eye(mdp.n_states) - mdp.gamma*P_pi).T, mdp.mu0)
    return d / d.sum()


def objective(mdp, theta):
    V, _ = solve_values(mdp, softmax_policy(mdp, theta))
    return float(mdp.mu0 @ V)


def score_expectation(mdp, theta, table, d=None):
    '''E_{s~d, tau~pi}[grad log pi(tau|s) table(s, tau)] as a flat (S*A,) vector'''
    pi = softmax_policy(mdp, theta)
    d = visitation_measure(mdp, pi) if d is None else d
    table = np.where(mdp.mask, np.asarray(table, dtype=float), 0.0)
    centered = table - np.sum(pi*table, axis=1, keepdims=True)
    return (d[:, None]*pi*centered).reshape(-1)


def exact_policy_gradient(mdp, theta):
    '''grad J by the policy gradient theorem, evaluated exactly'''
    pi = softmax_policy(mdp, theta)
    return score_expectation(mdp, theta, solve_real_advantage(mdp, pi)) / (1 - mdp.gamma)


def value_equation_gradient(mdp, theta):
    '''
    grad J by differentiating J = mu0 (I - gamma P_pi)^-1 r_pi through the
    softmax directly: dJ/dtheta(s, a) = w(s) sum_b dpi(b|s)/dtheta(s, a) backup(s, b)
    with w the unnormalised discounted visitation and backup = R + gamma P V.
    No advantage table is formed.
    '''
    pi = softmax_policy(mdp, theta)
    P_pi, r_pi = _policy_kernel(mdp, pi)
    system = np.eye(mdp.n_states) - mdp.gamma*P_pi
    V = linalg.solve(system, r_pi)
    w = linalg.solve(system.T, mdp.mu0)
    backup = np.where(mdp.mask, mdp.R + mdp.gamma*np.einsum('sat,t->sa', mdp.P, V), 0.0)
    # dpi(b|s)/dtheta(s, a) = pi(b|s) (1[a = b] - pi(a|s))
    jacobian = pi[:, :, None]*(np.eye(mdp.n_candidates)[None] - pi[:, None, :])   # (S, b, a)
    return (w[:, None]*np.einsum('sba,sb->sa', jacobian, backup)).reshape(-1)


def finite_difference_gradient(mdp, theta, eps=1e-6):
    '''central differences of J over every logit'''
    theta = np.asarray(theta, dtype=float).reshape(-1)
    grad = np.zeros_like(theta)
    for i in range(len(theta)):
        perturb = np.zeros_like(theta)
        perturb[i] = eps
        grad[i] = (objective(mdp, theta + perturb) - objective(mdp, theta - perturb)) / (2*eps)
    return grad


def score_norms_squared(mdp, theta):
    '''||grad log pi(tau|s)||^2 per (s, tau): 1 - 2 pi(tau|s) + sum_b pi(b|s)^2'''
    pi = softmax_policy(mdp, theta)
    return np.where(mdp.mask, 1 - 2*pi + np.sum(pi**2, axis=1, keepdims=True), 0.0)


def sample_score_vectors(mdp, theta, states, candidates):
    '''per-sample grad log pi(candidate | state), (N, S*A)'''
    pi = softmax_policy(mdp, theta)
    n = len(states)
    grads = np.zeros((n, mdp.n_states, mdp.n_candidates))
    grads[np.arange(n), states, :] = -pi[states]
    grads[np.arange(n), states, candidates] += 1.0
    return grads.reshape(n, -1)


def sample_visits(mdp, theta, n, rng):
    '''(states, candidates) with s ~ d and tau ~ pi(.|s)'''
    pi = softmax_policy(mdp, theta)
    d = visitation_measure(mdp, pi)
    states = rng.choice(mdp.n_states, size=n, p=d)
    u = rng.uniform(size=n)
    cdf = np.cumsum(pi[states], axis=1)
    candidates = np.minimum(np.sum(cdf < u[:, None], axis=1), mdp.n_candidates - 1)
    return states, candidates


def monte_carlo_visitation(mdp, pi, n_rollouts, rng):
    '''estimate d by geometric-length rollouts: stop each step with probability 1 - gamma'''
    counts = np.zeros(mdp.n_states)
    P_pi, _ = _policy_kernel(mdp, pi)
    cdf = np.cumsum(P_pi, axis=1)
    states = rng.choice(mdp.n_states, size=n_rollouts, p=mdp.mu0)
    alive = np.ones(n_rollouts, dtype=bool)
    while np.any(alive):
        stop = alive & (rng.uniform(size=n_rollouts) >= mdp.gamma)
        np.add.at(counts, states[stop], 1)
        alive &= ~stop
        u = rng.uniform(size=n_rollouts)
        nxt = np.minimum(np.sum(cdf[states] < u[:, None], axis=1), mdp.n_states - 1)
        states = np.where(alive, nxt, states)
    return counts / n_rollouts
