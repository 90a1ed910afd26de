"""Exact finite-MDP machinery: evaluation, occupancies, performance, divergences."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PROB_TOL = 1e-9
DIRECT_SOLVE_LIMIT = 10_000


class MdpError(ValueError):
    """Raised when an MDP or policy violates its structural invariants."""


def _frozen(x, dtype=float) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite discounted MDP ``(S, A, P, R, gamma, d0)``.

    ``transition`` has shape ``(S, A, S)`` and ``reward`` shape ``(S, A)``.
    ``r_max`` is the declared reward ceiling; ``v_max = r_max / (1 - gamma)``.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    initial_dist: np.ndarray
    r_max: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "transition", _frozen(self.transition))
        object.__setattr__(self, "reward", _frozen(self.reward))
        object.__setattr__(self, "initial_dist", _frozen(self.initial_dist))
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "r_max", float(self.r_max))
        if self.transition.ndim != 3 or self.transition.shape[0] != self.transition.shape[2]:
            raise MdpError(f"transition must have shape (S, A, S), got {self.transition.shape}")
        if self.reward.shape != self.transition.shape[:2]:
            raise MdpError(f"reward shape {self.reward.shape} does not match {self.transition.shape[:2]}")
        if self.initial_dist.shape != (self.n_states,):
            raise MdpError(f"initial_dist shape {self.initial_dist.shape} != ({self.n_states},)")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def v_max(self) -> float:
        return self.r_max / (1.0 - self.gamma)


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Row-stochastic ``(S, A)`` action-probability table."""

    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen(self.probs)
        if probs.ndim != 2:
            raise MdpError(f"policy table must be 2-D, got shape {probs.shape}")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            s, a = np.argwhere(~(probs >= 0))[0]
            raise MdpError(f"negative or non-finite probability at (s={s}, a={a})")
        sums = probs.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > PROB_TOL)
        if bad.size:
            raise MdpError(f"policy row {bad[0]} sums to {sums[bad[0]]!r}, not 1")
        object.__setattr__(self, "probs", probs)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "TabularPolicy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.size, n_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)

    def support(self) -> np.ndarray:
        return self.probs > 0


@dataclass(frozen=True, eq=False)
class OccupancyPair:
    """Normalized discounted state occupancy ``d`` and state-action occupancy ``rho``."""

    state_occ: np.ndarray
    state_action_occ: np.ndarray
    per_step: np.ndarray | None = field(default=None)


@dataclass(frozen=True, eq=False)
class PolicyDivergences:
    """Per-state divergences between two policies ``p`` and ``q``."""

    tv: np.ndarray
    kl_pq: np.ndarray
    kl_qp: np.ndarray


def validate_mdp(mdp: TabularMdp) -> None:
    """Raise :class:`MdpError` naming the first violated invariant."""
    P = mdp.transition
    if not 0.0 <= mdp.gamma < 1.0:
        raise MdpError(f"gamma={mdp.gamma} outside [0, 1)")
    neg = np.argwhere(P < 0)
    if neg.size:
        s, a, s2 = neg[0]
        raise MdpError(f"negative transition probability at (s={s}, a={a}, s'={s2})")
    sums = P.sum(axis=2)
    bad = np.argwhere(np.abs(sums - 1.0) > PROB_TOL)
    if bad.size:
        s, a = bad[0]
        raise MdpError(f"transition row (s={s}, a={a}) sums to {sums[s, a]!r}, not 1")
    d0 = mdp.initial_dist
    if np.any(d0 < 0) or abs(d0.sum() - 1.0) > PROB_TOL:
        raise MdpError(f"initial_dist is not a distribution (sum={d0.sum()!r})")
    low = np.argwhere(mdp.reward < 0)
    if low.size:
        s, a = low[0]
        raise MdpError(f"reward below 0 at (s={s}, a={a}): {mdp.reward[s, a]!r}")
    high = np.argwhere(mdp.reward > mdp.r_max)
    if high.size:
        s, a = high[0]
        raise MdpError(f"reward above r_max={mdp.r_max} at (s={s}, a={a}): {mdp.reward[s, a]!r}")


def _check_policy(mdp: TabularMdp, policy: TabularPolicy) -> None:
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise MdpError(
            f"policy shape {policy.probs.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})"
        )


def _check_table(mdp: TabularMdp, table: np.ndarray, name: str) -> None:
    if np.shape(table) != (mdp.n_states, mdp.n_actions):
        raise MdpError(f"{name} shape {np.shape(table)} does not match MDP ({mdp.n_states}, {mdp.n_actions})")


def state_values(q: np.ndarray, policy: TabularPolicy) -> np.ndarray:
    """``V(s) = sum_a pi(a|s) Q(s, a)``."""
    return np.einsum("sa,sa->s", policy.probs, q)


def bellman_apply(mdp: TabularMdp, policy: TabularPolicy, f: np.ndarray) -> np.ndarray:
    """One application of the policy Bellman operator to a Q-table."""
    _check_policy(mdp, policy)
    _check_table(mdp, f, "f")
    v = state_values(np.asarray(f, dtype=float), policy)
    return mdp.reward + mdp.gamma * (mdp.transition @ v)


def policy_transition(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    """State-to-state kernel ``P_pi[s, s'] = sum_a pi(a|s) P(s'|s,a)``."""
    return np.einsum("sa,sat->st", policy.probs, mdp.transition)


def exact_q(mdp: TabularMdp, policy: TabularPolicy, tol: float = 1e-10) -> np.ndarray:
    """Exact ``Q^pi``.

    Uses a direct linear solve on the state values when ``S*A`` is at most
    ``DIRECT_SOLVE_LIMIT``; otherwise iterates the Bellman operator until the
    fixed-point residual is below ``tol * (1 - gamma)``.
    """
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    _check_policy(mdp, policy)
    S, gamma = mdp.n_states, mdp.gamma
    if S * mdp.n_actions <= DIRECT_SOLVE_LIMIT:
        r_pi = state_values(mdp.reward, policy)
        v = np.linalg.solve(np.eye(S) - gamma * policy_transition(mdp, policy), r_pi)
        q = mdp.reward + gamma * (mdp.transition @ v)
        # one polishing sweep keeps the residual at the contraction scale
        q = bellman_apply(mdp, policy, q)
    else:
        q = np.zeros((S, mdp.n_actions))
        while True:
            nxt = bellman_apply(mdp, policy, q)
            done = np.max(np.abs(nxt - q)) <= tol * (1.0 - gamma) ** 2
            q = nxt
            if done:
                break
    return q


def advantage_from_q(q: np.ndarray, policy: TabularPolicy) -> np.ndarray:
    """``A(s, a) = Q(s, a) - sum_b pi(b|s) Q(s, b)``."""
    q = np.asarray(q, dtype=float)
    if q.shape != policy.probs.shape:
        raise MdpError(f"Q shape {q.shape} does not match policy shape {policy.probs.shape}")
    return q - state_values(q, policy)[:, None]


def default_horizon(gamma: float, tail: float = 1e-10) -> int:
    if gamma == 0.0:
        return 1
    return int(math.ceil(math.log(tail) / math.log(gamma)))


def occupancy(
    mdp: TabularMdp,
    policy: TabularPolicy,
    horizon: int | None = None,
    keep_per_step: bool = False,
    tail: float = 1e-10,
) -> OccupancyPair:
    """Discounted occupancy ``d = (1 - gamma) sum_t gamma^t d_t``, truncated at ``horizon``."""
    _check_policy(mdp, policy)
    gamma = mdp.gamma
    if horizon is None:
        horizon = default_horizon(gamma, tail)
    if horizon < 1 or gamma**horizon > tail:
        raise ValueError(
            f"horizon {horizon} too small: gamma^horizon = {gamma**horizon:.3e} > {tail:g}"
        )
    P_pi = policy_transition(mdp, policy)
    d_t = mdp.initial_dist.copy()
    d = np.zeros(mdp.n_states)
    steps = []
    weight = 1.0 - gamma
    for _ in range(horizon):
        d += weight * d_t
        if keep_per_step:
            steps.append(d_t)
        d_t = d_t @ P_pi
        weight *= gamma
    rho = d[:, None] * policy.probs
    return OccupancyPair(d, rho, np.array(steps) if keep_per_step else None)


def performance(mdp: TabularMdp, policy: TabularPolicy) -> float:
    """Expected discounted return from ``d0``."""
    q = exact_q(mdp, policy)
    return float(mdp.initial_dist @ state_values(q, policy))


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise ``KL(p || q)``; ``+inf`` where ``p`` puts mass outside ``supp(q)``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    pos = p > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pos, p * (np.log(np.where(pos, p, 1.0)) - np.log(q)), 0.0)
    out = terms.sum(axis=-1)
    violated = np.any(pos & (q <= 0), axis=-1)
    return np.where(violated, np.inf, np.maximum(out, 0.0))


def tv_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)


def policy_divergences(p: TabularPolicy, q: TabularPolicy) -> PolicyDivergences:
    """Per-state total variation and both KL directions."""
    if p.probs.shape != q.probs.shape:
        raise MdpError(f"policy shapes differ: {p.probs.shape} vs {q.probs.shape}")
    return PolicyDivergences(
        tv=tv_rows(p.probs, q.probs),
        kl_pq=kl_rows(p.probs, q.probs),
        kl_qp=kl_rows(q.probs, p.probs),
    )
