"""Environment builders and rollout-based evaluation."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .data import make_rng
from .mdp import TabularMdp, TabularPolicy, policy_transition, state_values

UP, DOWN, LEFT, RIGHT = range(4)
ACTION_NAMES = ("up", "down", "left", "right")
_MOVES = {UP: (0, 1), DOWN: (0, -1), LEFT: (-1, 0), RIGHT: (1, 0)}


class BuildError(ValueError):
    pass


def _default_wall():
    return [(4, y) for y in range(8)]


@dataclass(frozen=True)
class MazeSpec:
    """Grid maze. ``y`` grows upward, so ``(0, 0)`` is the bottom-left cell."""

    width: int = 10
    height: int = 10
    wall_cells: list = field(default_factory=_default_wall)
    goal_cell: tuple = (9, 9)
    start_cell: tuple = (0, 0)
    step_limit: int = 25
    gamma: float = 0.9
    goal_reward: float = 1.0

    def lower_half(self, y: int) -> bool:
        return y < self.height // 2


@dataclass(frozen=True)
class MazeLayout:
    """Mapping between grid cells and MDP state indices."""

    spec: MazeSpec
    absorbing_state: int

    def state_of(self, x: int, y: int) -> int:
        return y * self.spec.width + x

    def cell_of(self, s: int) -> tuple[int, int] | None:
        if s == self.absorbing_state:
            return None
        return s % self.spec.width, s // self.spec.width

    @property
    def start_state(self) -> int:
        return self.state_of(*self.spec.start_cell)

    @property
    def goal_state(self) -> int:
        return self.state_of(*self.spec.goal_cell)

    def free_states(self) -> list[int]:
        walls = {tuple(c) for c in self.spec.wall_cells}
        return [
            self.state_of(x, y)
            for y in range(self.spec.height)
            for x in range(self.spec.width)
            if (x, y) not in walls
        ]


def build_maze(spec: MazeSpec) -> tuple[TabularMdp, MazeLayout]:
    """Deterministic 4-action grid maze with an absorbing post-goal state.

    Moving into a wall or off the grid leaves the agent in place. Entering the
    goal pays ``goal_reward``; every action at the goal leads to the absorbing
    state, which pays nothing forever.
    """
    W, H = spec.width, spec.height
    walls = {tuple(c) for c in spec.wall_cells}
    start, goal = tuple(spec.start_cell), tuple(spec.goal_cell)

    def inside(c):
        return 0 <= c[0] < W and 0 <= c[1] < H

    if W < 1 or H < 1:
        raise BuildError("build_maze: width and height must be positive")
    if not inside(start) or not inside(goal):
        raise BuildError("build_maze: start or goal outside the grid")
    if start == goal:
        raise BuildError("build_maze: start and goal coincide")
    if start in walls or goal in walls:
        raise BuildError("build_maze: start or goal inside a wall")
    if not all(inside(c) for c in walls):
        raise BuildError("build_maze: wall cell outside the grid")

    n_cells = W * H
    layout = MazeLayout(spec, absorbing_state=n_cells)
    S = n_cells + 1
    P = np.zeros((S, 4, S))
    R = np.zeros((S, 4))

    def step(c, a):
        dx, dy = _MOVES[a]
        nxt = (c[0] + dx, c[1] + dy)
        return nxt if inside(nxt) and nxt not in walls else c

    for y in range(H):
        for x in range(W):
            s = layout.state_of(x, y)
            for a in range(4):
                if (x, y) == goal:
                    P[s, a, layout.absorbing_state] = 1.0
                    continue
                if (x, y) in walls:
                    P[s, a, s] = 1.0
                    continue
                nxt = step((x, y), a)
                P[s, a, layout.state_of(*nxt)] = 1.0
                if nxt == goal:
                    R[s, a] = spec.goal_reward
    P[layout.absorbing_state, :, layout.absorbing_state] = 1.0

    seen, queue = {start}, deque([start])
    while queue:
        c = queue.popleft()
        for a in range(4):
            n = step(c, a)
            if n not in seen:
                seen.add(n)
                queue.append(n)
    if goal not in seen:
        raise BuildError("build_maze: goal unreachable from start")

    d0 = np.zeros(S)
    d0[layout.start_state] = 1.0
    return TabularMdp(P, R, spec.gamma, d0, r_max=spec.goal_reward), layout


def build_random_mdp(
    n_states: int,
    n_actions: int,
    branching: int,
    reward_sparsity: float,
    gamma: float,
    seed: int,
) -> TabularMdp:
    """Random MDP: each ``(s, a)`` reaches ``branching`` distinct states with Dirichlet(1) weights.

    Rewards are uniform on [0, 1] and zeroed with probability ``reward_sparsity``.
    The initial distribution is uniform.
    """
    if not 1 <= branching <= n_states:
        raise ValueError("branching must lie in [1, n_states]")
    rng = make_rng(seed)
    P = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            targets = rng.choice(n_states, size=branching, replace=False)
            P[s, a, targets] = rng.dirichlet(np.ones(branching))
    P /= P.sum(axis=2, keepdims=True)
    R = rng.random((n_states, n_actions))
    R[rng.random((n_states, n_actions)) < reward_sparsity] = 0.0
    d0 = np.full(n_states, 1.0 / n_states)
    return TabularMdp(P, R, gamma, d0, r_max=1.0)


def truncated_return(
    mdp: TabularMdp,
    policy: TabularPolicy,
    step_limit: int,
    n_rollouts: int,
    seed: int,
) -> tuple[float, float]:
    """Monte-Carlo mean and standard error of the undiscounted ``step_limit``-step return."""
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be at least 1")
    rng = make_rng(seed)
    cum_d0 = np.cumsum(mdp.initial_dist)
    cum_pi = np.cumsum(policy.probs, axis=1)
    cum_p = np.cumsum(mdp.transition, axis=2)

    def draw(cum, u):
        idx = (cum < (u * cum[..., -1])[..., None]).sum(axis=-1)
        return np.minimum(idx, cum.shape[-1] - 1)

    s = draw(np.broadcast_to(cum_d0, (n_rollouts, cum_d0.size)), rng.random(n_rollouts))
    total = np.zeros(n_rollouts)
    for _ in range(step_limit):
        a = draw(cum_pi[s], rng.random(n_rollouts))
        total += mdp.reward[s, a]
        s = draw(cum_p[s, a], rng.random(n_rollouts))
    se = float(total.std(ddof=1) / np.sqrt(n_rollouts)) if n_rollouts > 1 else 0.0
    return float(total.mean()), se


def expected_truncated_return(mdp: TabularMdp, policy: TabularPolicy, step_limit: int) -> float:
    """Exact expectation of the quantity :func:`truncated_return` samples."""
    P_pi = policy_transition(mdp, policy)
    r_pi = state_values(mdp.reward, policy)
    d = mdp.initial_dist.copy()
    total = 0.0
    for _ in range(step_limit):
        total += float(d @ r_pi)
        d = d @ P_pi
    return total
