"""Small constructors shared by the test modules."""

import numpy as np

from strlab.data import TransitionDataset, make_rng, support_mask_from_policy
from strlab.envs import build_random_mdp
from strlab.mdp import TabularMdp, TabularPolicy


def chain_mdp(gamma=0.5):
    """s0 -> s1 with reward 0; s1 absorbing with reward 1."""
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = 1.0
    P[1, 0, 1] = 1.0
    R = np.array([[0.0], [1.0]])
    return TabularMdp(P, R, gamma, np.array([1.0, 0.0]))


def single_state_mdp(reward=1.0, gamma=0.9, n_actions=1):
    P = np.ones((1, n_actions, 1))
    R = np.full((1, n_actions), reward)
    return TabularMdp(P, R, gamma, np.array([1.0]), r_max=max(1.0, reward))


def random_policy(rng, n_states, n_actions, keep_prob=1.0):
    """Dirichlet rows; with ``keep_prob < 1`` some entries are zeroed (one action always kept)."""
    keep = rng.random((n_states, n_actions)) < keep_prob
    keep[np.arange(n_states), rng.integers(0, n_actions, size=n_states)] = True
    w = np.where(keep, rng.random((n_states, n_actions)) + 0.05, 0.0)
    return TabularPolicy(w / w.sum(axis=1, keepdims=True))


def random_instance(seed, max_states=20, max_actions=5, keep_prob=0.6, gamma=0.9):
    """A random MDP with a restricted-support behavior policy and its support mask."""
    rng = make_rng(1000 + seed)
    S = int(rng.integers(2, max_states + 1))
    A = int(rng.integers(2, max_actions + 1))
    mdp = build_random_mdp(S, A, min(3, S), 0.5, gamma, seed)
    beta = random_policy(rng, S, A, keep_prob)
    return mdp, beta, support_mask_from_policy(beta)


def exhaustive_dataset(mdp, per_pair, seed):
    """``per_pair`` sampled transitions for every ``(s, a)``."""
    rng = make_rng(seed)
    S, A = mdp.n_states, mdp.n_actions
    s = np.repeat(np.arange(S), A * per_pair)
    a = np.tile(np.repeat(np.arange(A), per_pair), S)
    cdf = np.cumsum(mdp.transition[s, a], axis=1)
    nxt = np.minimum((rng.random(s.size)[:, None] > cdf).sum(axis=1), S - 1)
    return TransitionDataset(s, a, mdp.reward[s, a], nxt, np.zeros(s.size, bool), S, A, seed=seed, gamma=mdp.gamma)


def value_iteration(mdp, n_iter=2000):
    """Plain unconstrained value iteration, used as an independent oracle."""
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(n_iter):
        q = mdp.reward + mdp.gamma * mdp.transition @ q.max(axis=1)
    return q
