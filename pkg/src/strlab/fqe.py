"""Fitted Q evaluation over linear feature classes, plus its error bound."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .data import TransitionDataset, make_rng
from .mdp import OccupancyPair, TabularMdp, TabularPolicy, policy_transition

DEFAULT_RIDGE = 1e-8


class FqeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Linear features ``phi(s, a)`` stored as an ``(S * A, dim)`` matrix."""

    matrix: np.ndarray
    n_states: int
    n_actions: int
    kind: str

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def evaluate(self, s, a) -> np.ndarray:
        return self.matrix[np.asarray(s) * self.n_actions + np.asarray(a)]

    def predict(self, weights: np.ndarray) -> np.ndarray:
        return (self.matrix @ weights).reshape(self.n_states, self.n_actions)

    @classmethod
    def one_hot(cls, n_states: int, n_actions: int) -> "FeatureMap":
        return cls(np.eye(n_states * n_actions), n_states, n_actions, "one-hot")

    @classmethod
    def state_aggregation(cls, partition, n_actions: int) -> "FeatureMap":
        """One indicator per (group, action); ``partition[s]`` is the group of state ``s``."""
        groups = np.asarray(partition, dtype=int)
        n_groups = int(groups.max()) + 1
        S = groups.size
        m = np.zeros((S * n_actions, n_groups * n_actions))
        for s in range(S):
            for a in range(n_actions):
                m[s * n_actions + a, groups[s] * n_actions + a] = 1.0
        return cls(m, S, n_actions, "state-aggregation")

    @classmethod
    def random_projection(cls, n_states: int, n_actions: int, dim: int, seed: int) -> "FeatureMap":
        """Gaussian features scaled so every row has norm at most 1."""
        m = make_rng(seed).normal(size=(n_states * n_actions, dim))
        m /= np.linalg.norm(m, axis=1).max()
        return cls(m, n_states, n_actions, "random-projection")


@dataclass(eq=False)
class FqeResult:
    weights_per_iteration: list
    lsq_residuals: list
    features: FeatureMap
    v_max: float
    weighted_l1_error: float | None = None
    bound_value: float | None = None

    @property
    def k(self) -> int:
        return len(self.weights_per_iteration) - 1

    def q_table(self, k: int | None = None) -> np.ndarray:
        """Predictions of iterate ``k`` (default: last), clipped to ``[0, v_max]``."""
        w = self.weights_per_iteration[self.k if k is None else k]
        return np.clip(self.features.predict(w), 0.0, self.v_max)

    def to_json(self, inputs: "FqeBoundInputs | None" = None) -> str:
        return json.dumps(
            {
                "k": self.k,
                "residuals": [float(r) for r in self.lsq_residuals],
                "l1_error": self.weighted_l1_error,
                "bound": self.bound_value,
                "inputs": asdict(inputs) if inputs is not None else None,
            },
            sort_keys=True,
        )


def fqe_run(
    dataset: TransitionDataset,
    policy: TabularPolicy,
    features: FeatureMap,
    k: int,
    ridge: float = DEFAULT_RIDGE,
    gamma: float | None = None,
    v_max: float | None = None,
) -> FqeResult:
    """Iterate ``f_j = argmin_w sum_D (phi(s,a) w - r - gamma * f_{j-1}(s', pi))^2 + ridge |w|^2``.

    ``f_0`` is the zero vector. Bootstrapped values are clipped to ``[0, v_max]``.
    """
    if k < 1:
        raise FqeError("k must be at least 1")
    if ridge < 0:
        raise FqeError("ridge must be non-negative")
    gamma = dataset.gamma if gamma is None else gamma
    if gamma is None:
        raise FqeError("gamma must be given when the dataset does not record it")
    if v_max is None:
        v_max = max(1.0, float(dataset.rewards.max(initial=0.0))) / (1.0 - gamma)
    if policy.probs.shape != (features.n_states, features.n_actions):
        raise FqeError("policy shape does not match the feature map")

    phi = features.evaluate(dataset.states, dataset.actions)
    gram = phi.T @ phi + ridge * np.eye(features.dim)
    try:
        factor = cho_factor(gram)
    except np.linalg.LinAlgError:
        raise FqeError("normal equations are singular; set ridge > 0") from None
    if not np.all(np.isfinite(factor[0])) or np.min(np.abs(np.diag(factor[0]))) < 1e-150:
        raise FqeError("normal equations are singular; set ridge > 0")

    weights = [np.zeros(features.dim)]
    residuals = []
    pi_next = policy.probs[dataset.next_states]
    for _ in range(k):
        q_prev = np.clip(features.predict(weights[-1]), 0.0, v_max)
        v_next = np.sum(pi_next * q_prev[dataset.next_states], axis=1)
        target = dataset.rewards + gamma * v_next
        w = cho_solve(factor, phi.T @ target)
        weights.append(w)
        residuals.append(float(np.sqrt(np.mean((phi @ w - target) ** 2))) if len(dataset) else 0.0)
    return FqeResult(weights, residuals, features, v_max)


def fqe_error(result: FqeResult, exact_q: np.ndarray, occupancy: OccupancyPair) -> float:
    """``sum_{s,a} rho(s,a) |Q(s,a) - f_K(s,a)|``."""
    f = result.q_table()
    rho = occupancy.state_action_occ
    if f.shape != np.shape(exact_q) or rho.shape != f.shape:
        raise FqeError(f"shape mismatch: f {f.shape}, Q {np.shape(exact_q)}, rho {rho.shape}")
    return float(np.sum(rho * np.abs(np.asarray(exact_q) - f)))


@dataclass(frozen=True)
class FqeBoundInputs:
    delta: float
    class_size_proxy: float
    concentrability: float
    completeness_eps: float
    k: int
    dataset_size: int
    gamma: float
    v_max: float
    measured: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.class_size_proxy < 1 or self.concentrability < 1:
            raise ValueError("class_size_proxy and concentrability must be at least 1")
        if self.completeness_eps < 0 or self.k < 0 or self.dataset_size < 1:
            raise ValueError("completeness_eps, k must be non-negative and dataset_size positive")


def generalization_eps(inputs: FqeBoundInputs) -> float:
    """``44 v_max^2 log(|F| K / delta) / |D| + 20 eps_complete``."""
    log_term = math.log(inputs.class_size_proxy * max(inputs.k, 1) / inputs.delta)
    return 44.0 * inputs.v_max**2 * log_term / inputs.dataset_size + 20.0 * inputs.completeness_eps


def fqe_bound(inputs: FqeBoundInputs) -> float:
    """Upper bound on the ``rho^pi``-weighted L1 error of the K-th FQE iterate."""
    g = inputs.gamma
    decay = g ** inputs.k
    if inputs.k == 0:
        return inputs.v_max
    return (1.0 - decay) / (1.0 - g) * math.sqrt(inputs.concentrability * generalization_eps(inputs)) + decay * inputs.v_max


def measured_concentrability(
    mdp: TabularMdp,
    policy: TabularPolicy,
    dataset: TransitionDataset,
    horizon: int = 200,
) -> float:
    """``max_t max_{(s,a) in D} rho_t^pi(s,a) / rho_D(s,a)``, floored at 1.

    ``rho_t^pi`` is the undiscounted step-``t`` state-action distribution and
    ``rho_D`` the empirical pair frequency of the dataset.
    """
    n_sa = dataset.sa_counts.astype(float)
    seen = n_sa > 0
    rho_d = n_sa / max(len(dataset), 1)
    S = dataset.n_states
    probs = policy.probs[:S]
    P_pi = policy_transition(mdp, policy)
    d = mdp.initial_dist.copy()
    worst = 1.0
    for _ in range(horizon):
        rho_t = d[:S, None] * probs
        ratio = np.where(seen, rho_t / np.where(seen, rho_d, 1.0), 0.0)
        worst = max(worst, float(ratio.max()))
        d = d @ P_pi
    return worst
