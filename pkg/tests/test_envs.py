import numpy as np
import pytest

from strlab.data import make_rng
from strlab.envs import (
    DOWN,
    LEFT,
    RIGHT,
    UP,
    BuildError,
    MazeSpec,
    build_maze,
    build_random_mdp,
    expected_truncated_return,
    truncated_return,
)
from strlab.mdp import TabularPolicy, performance, validate_mdp


def discounted_rollouts(mdp, policy, n, horizon, seed):
    """Independent discounted Monte-Carlo estimate of the performance."""
    rng = make_rng(seed)
    pi_cdf = np.cumsum(policy.probs, axis=1)
    p_cdf = np.cumsum(mdp.transition, axis=2)
    s = np.searchsorted(np.cumsum(mdp.initial_dist), rng.random(n), side="right")
    total = np.zeros(n)
    disc = 1.0
    for _ in range(horizon):
        a = (rng.random(n)[:, None] >= pi_cdf[s]).sum(axis=1)
        total += disc * mdp.reward[s, a]
        s = np.minimum((rng.random(n)[:, None] >= p_cdf[s, a]).sum(axis=1), mdp.n_states - 1)
        disc *= mdp.gamma
    return total.mean(), total.std(ddof=1) / np.sqrt(n)


def test_tiny_maze():
    spec = MazeSpec(width=2, height=1, wall_cells=[], goal_cell=(1, 0), start_cell=(0, 0))
    mdp, layout = build_maze(spec)
    assert mdp.n_states == 3 and layout.absorbing_state == 2
    assert mdp.reward[0, RIGHT] == 1.0
    assert mdp.transition[0, RIGHT, 1] == 1.0
    assert mdp.transition[1, UP, 2] == 1.0
    assert mdp.transition[2, DOWN, 2] == 1.0


def test_default_maze_shape():
    mdp, layout = build_maze(MazeSpec())
    validate_mdp(mdp)
    assert (mdp.n_states, mdp.n_actions) == (101, 4)
    wall = layout.state_of(4, 3)
    assert mdp.transition[layout.state_of(3, 3), RIGHT, layout.state_of(3, 3)] == 1.0
    assert mdp.transition[wall, LEFT, wall] == 1.0
    assert mdp.reward.sum() == 2.0  # the two moves into the goal from its neighbours


def test_goal_in_wall_rejected():
    with pytest.raises(BuildError, match="build_maze"):
        build_maze(MazeSpec(goal_cell=(4, 0)))


def test_random_mdp_properties():
    det = build_random_mdp(7, 3, 1, 0.5, 0.9, seed=1)
    assert np.all(det.transition.max(axis=2) == 1.0)
    a, b = build_random_mdp(7, 3, 2, 0.5, 0.9, seed=5), build_random_mdp(7, 3, 2, 0.5, 0.9, seed=5)
    assert np.array_equal(a.transition, b.transition) and np.array_equal(a.reward, b.reward)


def test_random_mdp_fuzz():
    for seed in range(1000):
        rng = make_rng(seed)
        S = int(rng.integers(1, 12))
        validate_mdp(build_random_mdp(S, int(rng.integers(1, 5)), int(rng.integers(1, S + 1)), 0.5, 0.9, seed))


def test_truncated_return_zero_reward():
    mdp = build_random_mdp(4, 2, 2, 1.0, 0.9, seed=0)
    assert truncated_return(mdp, TabularPolicy.uniform(4, 2), 25, 100, seed=0) == (0.0, 0.0)


def test_shortest_path_policy_succeeds():
    mdp, layout = build_maze(MazeSpec())
    actions = np.full(mdp.n_states, UP)
    for s in range(100):
        x, y = layout.cell_of(s)
        if y >= 8 and x < 9:
            actions[s] = RIGHT
    pi = TabularPolicy.deterministic(actions, 4)
    assert truncated_return(mdp, pi, 25, 200, seed=1) == (1.0, 0.0)
    assert expected_truncated_return(mdp, pi, 25) == 1.0


def test_uniform_truncated_return_matches_exact():
    mdp, _ = build_maze(MazeSpec())
    start = np.zeros(mdp.n_states)
    start[[0, 55, 88]] = 1 / 3
    from strlab.mdp import TabularMdp

    mdp = TabularMdp(mdp.transition, mdp.reward, mdp.gamma, start)
    pi = TabularPolicy.uniform(mdp.n_states, 4)
    mean, se = truncated_return(mdp, pi, 25, 10_000, seed=2)
    assert abs(mean - expected_truncated_return(mdp, pi, 25)) <= 3 * se


def test_uniform_performance_matches_rollouts():
    mdp, _ = build_maze(MazeSpec())
    pi = TabularPolicy.uniform(mdp.n_states, 4)
    mean, se = discounted_rollouts(mdp, pi, 10_000, 250, seed=3)
    assert abs(mean - performance(mdp, pi)) <= 3 * se + 1e-12
    print("uniform maze eta", performance(mdp, pi), "mc", mean, "se", se)
