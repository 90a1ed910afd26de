"""Offline datasets: rollout, empirical MDP, behavior estimate, support bookkeeping."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np

from .mdp import TabularMdp, TabularPolicy

CSV_COLUMNS = ("s", "a", "r", "s_next", "done")


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator used everywhere randomness enters the pipeline."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True, eq=False)
class TransitionDataset:
    """Ordered ``(s, a, r, s', done)`` records with their count tables."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    n_states: int
    n_actions: int
    seed: int | None = None
    gamma: float | None = None

    def __post_init__(self):
        for name, dtype in (
            ("states", np.int64),
            ("actions", np.int64),
            ("rewards", float),
            ("next_states", np.int64),
            ("dones", bool),
        ):
            arr = np.array(getattr(self, name), dtype=dtype).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n = len(self.states)
        if not all(len(getattr(self, k)) == n for k in ("actions", "rewards", "next_states", "dones")):
            raise ValueError("record columns have different lengths")
        if n and (
            self.states.max() >= self.n_states
            or self.next_states.max() >= self.n_states
            or self.actions.max() >= self.n_actions
            or min(self.states.min(), self.next_states.min(), self.actions.min()) < 0
        ):
            raise IndexError("state or action index out of range for dataset dimensions")

    def __len__(self) -> int:
        return len(self.states)

    @cached_property
    def counts(self) -> np.ndarray:
        """Dense ``N(s, a, s')``."""
        n = np.zeros((self.n_states, self.n_actions, self.n_states), dtype=np.int64)
        np.add.at(n, (self.states, self.actions, self.next_states), 1)
        return n

    @property
    def sa_counts(self) -> np.ndarray:
        """``n(s, a)``."""
        return self.counts.sum(axis=2)

    @property
    def state_counts(self) -> np.ndarray:
        """``n(s)``."""
        return self.sa_counts.sum(axis=1)

    def visited_states(self) -> np.ndarray:
        return self.state_counts > 0

    def subset(self, keep: np.ndarray) -> "TransitionDataset":
        return TransitionDataset(
            self.states[keep],
            self.actions[keep],
            self.rewards[keep],
            self.next_states[keep],
            self.dones[keep],
            self.n_states,
            self.n_actions,
            self.seed,
            self.gamma,
        )


@dataclass(frozen=True, eq=False)
class SupportMask:
    """Boolean ``(S, A)`` table of in-support pairs."""

    mask: np.ndarray
    source: str = "from-dataset-counts"

    def __post_init__(self):
        arr = np.array(self.mask, dtype=bool)
        arr.setflags(write=False)
        object.__setattr__(self, "mask", arr)
        if self.source not in ("from-dataset-counts", "from-policy-threshold"):
            raise ValueError(f"unknown mask source {self.source!r}")

    def is_submask_of(self, other: "SupportMask") -> bool:
        return bool(np.all(~self.mask | other.mask))


def rollout_dataset(
    mdp: TabularMdp,
    behavior: TabularPolicy,
    n_transitions: int,
    max_episode_len: int,
    seed: int,
    terminal_states=(),
) -> TransitionDataset:
    """Collect exactly ``n_transitions`` records by running ``behavior`` in ``mdp``.

    Episodes start from ``mdp.initial_dist`` and restart after entering a
    terminal state (``done=True``) or after ``max_episode_len`` steps.
    """
    if n_transitions <= 0:
        raise ValueError("n_transitions must be positive")
    rng = make_rng(seed)
    S, A = mdp.n_states, mdp.n_actions
    terminal = np.zeros(S, dtype=bool)
    terminal[list(terminal_states)] = True
    # cumulative tables make each draw a single searchsorted
    cum_p = np.cumsum(mdp.transition, axis=2)
    cum_pi = np.cumsum(behavior.probs, axis=1)
    cum_d0 = np.cumsum(mdp.initial_dist)
    u = rng.random((n_transitions, 2))
    starts = rng.random(n_transitions + 1)

    states = np.empty(n_transitions, dtype=np.int64)
    actions = np.empty(n_transitions, dtype=np.int64)
    nexts = np.empty(n_transitions, dtype=np.int64)
    dones = np.zeros(n_transitions, dtype=bool)

    def draw(cum, x):
        return min(int(np.searchsorted(cum, x * cum[-1], side="right")), len(cum) - 1)

    s = draw(cum_d0, starts[0])
    t = 0
    for i in range(n_transitions):
        a = draw(cum_pi[s], u[i, 0])
        s2 = draw(cum_p[s, a], u[i, 1])
        states[i], actions[i], nexts[i] = s, a, s2
        t += 1
        if terminal[s2]:
            dones[i] = True
        if dones[i] or t >= max_episode_len:
            s = draw(cum_d0, starts[i + 1])
            t = 0
        else:
            s = s2
    rewards = mdp.reward[states, actions]
    return TransitionDataset(states, actions, rewards, nexts, dones, S, A, seed, mdp.gamma)


def empirical_mdp(
    dataset: TransitionDataset,
    n_states: int,
    n_actions: int,
    gamma: float,
    init_value: float = 0.0,
    initial_dist=None,
) -> TabularMdp:
    """Count-based MDP with an extra absorbing sink as the last state.

    Seen pairs use ``N(s,a,s') / n(s,a)`` and the mean observed reward.
    Unseen pairs move to the sink with reward ``init_value``; the sink loops on
    itself with zero reward, so ``Q(s, a) = init_value`` there under any policy.
    """
    if len(dataset) and (
        dataset.states.max() >= n_states
        or dataset.next_states.max() >= n_states
        or dataset.actions.max() >= n_actions
    ):
        raise IndexError("dataset index out of range for requested dimensions")
    counts = np.zeros((n_states, n_actions, n_states))
    np.add.at(counts, (dataset.states, dataset.actions, dataset.next_states), 1)
    reward_sum = np.zeros((n_states, n_actions))
    np.add.at(reward_sum, (dataset.states, dataset.actions), dataset.rewards)
    n_sa = counts.sum(axis=2)
    seen = n_sa > 0

    sink = n_states
    P = np.zeros((n_states + 1, n_actions, n_states + 1))
    P[:n_states, :, :n_states] = np.divide(
        counts, n_sa[:, :, None], out=np.zeros_like(counts), where=seen[:, :, None]
    )
    P[:n_states, :, sink] = np.where(seen, 0.0, 1.0)
    P[sink, :, sink] = 1.0
    R = np.zeros((n_states + 1, n_actions))
    R[:n_states] = np.where(seen, np.divide(reward_sum, n_sa, out=np.zeros_like(reward_sum), where=seen), init_value)

    if initial_dist is None:
        visited = seen.any(axis=1)
        d0 = visited.astype(float) if visited.any() else np.ones(n_states)
        d0 = d0 / d0.sum()
    else:
        d0 = np.asarray(initial_dist, dtype=float)
    d0 = np.append(d0, 0.0)
    r_max = max(1.0, float(R.max()))
    return TabularMdp(P, R, gamma, d0, r_max=r_max)


def pad_policy(policy: TabularPolicy, n_states: int) -> TabularPolicy:
    """Extend a policy with uniform rows so it acts on an MDP with extra states."""
    extra = n_states - policy.n_states
    if extra < 0:
        raise ValueError("cannot pad a policy to fewer states")
    if extra == 0:
        return policy
    rows = np.full((extra, policy.n_actions), 1.0 / policy.n_actions)
    return TabularPolicy(np.vstack([policy.probs, rows]))


def estimate_behavior(dataset: TransitionDataset, n_states: int, n_actions: int) -> TabularPolicy:
    """``beta_hat(a|s) = n(s,a) / n(s)``; unvisited states get the uniform row."""
    n_sa = np.zeros((n_states, n_actions))
    np.add.at(n_sa, (dataset.states, dataset.actions), 1)
    n_s = n_sa.sum(axis=1, keepdims=True)
    probs = np.where(n_s > 0, n_sa / np.maximum(n_s, 1), 1.0 / n_actions)
    return TabularPolicy(probs)


def support_mask_from_dataset(dataset: TransitionDataset, n_states: int, n_actions: int) -> SupportMask:
    mask = np.zeros((n_states, n_actions), dtype=bool)
    mask[dataset.states, dataset.actions] = True
    return SupportMask(mask, "from-dataset-counts")


def support_mask_from_policy(policy: TabularPolicy, threshold: float = 0.0) -> SupportMask:
    return SupportMask(policy.probs > threshold, "from-policy-threshold")


def filter_dataset(dataset: TransitionDataset, drop: Callable[[int, int], bool]) -> TransitionDataset:
    """Keep the records whose ``(s, a)`` does not satisfy ``drop``, in order."""
    keep = np.array([not drop(int(s), int(a)) for s, a in zip(dataset.states, dataset.actions)], dtype=bool)
    return dataset.subset(keep)


def ood_ratio(
    policy: TabularPolicy,
    mask: SupportMask,
    threshold: float = 0.0,
    states: np.ndarray | None = None,
) -> float:
    """Fraction of the policy's used pairs that lie outside ``mask``.

    ``states`` optionally restricts the count to a boolean subset of states
    (e.g. the dataset-visited ones).
    """
    if not 0.0 <= threshold < 1.0:
        raise ValueError("threshold must lie in [0, 1)")
    used = policy.probs > threshold
    if states is not None:
        used = used & np.asarray(states, dtype=bool)[:, None]
    total = int(used.sum())
    if total == 0:
        raise ValueError("policy uses no state-action pairs in the selected states")
    return float((used & ~mask.mask).sum()) / total


def save_dataset(dataset: TransitionDataset, path) -> None:
    """Write ``<path>`` (CSV records) and ``<path>.json`` (metadata sidecar)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for s, a, r, s2, d in zip(
            dataset.states, dataset.actions, dataset.rewards, dataset.next_states, dataset.dones
        ):
            writer.writerow((int(s), int(a), format(float(r), ".17g"), int(s2), int(d)))
    meta = {
        "seed": dataset.seed,
        "n_states": dataset.n_states,
        "n_actions": dataset.n_actions,
        "gamma": dataset.gamma,
    }
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> TransitionDataset:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    cols: dict[str, list] = {k: [] for k in CSV_COLUMNS}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        for row in reader:
            cols["s"].append(int(row["s"]))
            cols["a"].append(int(row["a"]))
            cols["r"].append(float(row["r"]))
            cols["s_next"].append(int(row["s_next"]))
            cols["done"].append(bool(int(row["done"])))
    return TransitionDataset(
        cols["s"],
        cols["a"],
        cols["r"],
        cols["s_next"],
        cols["done"],
        meta["n_states"],
        meta["n_actions"],
        meta.get("seed"),
        meta.get("gamma"),
    )
