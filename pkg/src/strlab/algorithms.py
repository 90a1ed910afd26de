"""Policy-iteration drivers: STR, the advantage-weighted baselines, and the support-constrained optimum."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import SupportMask, ood_ratio, pad_policy
from .mdp import (
    TabularMdp,
    TabularPolicy,
    exact_q,
    kl_rows,
    performance,
    state_values,
    tv_rows,
)
from .update import (
    ConstrainedUpdateConfig,
    PenaltyUpdateConfig,
    constrained_update,
    penalty_update,
    support_project,
)

PE_POLICIES = ("behavior", "current")
BASE_POLICIES = ("behavior", "projected-current", "abm-two-stage")
STRICT_MARGIN = 1e-8

UpdateConfig = ConstrainedUpdateConfig | PenaltyUpdateConfig


@dataclass(frozen=True)
class VariantSpec:
    """Which policy is evaluated, which policy anchors the update, and the update form."""

    name: str
    pe_policy: str
    base_policy: str
    update: UpdateConfig
    n_iterations: int = 1

    def __post_init__(self):
        if self.pe_policy not in PE_POLICIES:
            raise ValueError(f"pe_policy must be one of {PE_POLICIES}")
        if self.base_policy not in BASE_POLICIES:
            raise ValueError(f"base_policy must be one of {BASE_POLICIES}")
        if self.n_iterations < 0:
            raise ValueError("n_iterations must be non-negative")

    @property
    def one_step(self) -> bool:
        return self.pe_policy == "behavior" and self.base_policy == "behavior"


_TABLE = {
    "awr": ("behavior", "behavior"),
    "marwil": ("behavior", "behavior"),
    "awac": ("current", "behavior"),
    "crr": ("current", "behavior"),
    "abm": ("current", "abm-two-stage"),
    "str": ("current", "projected-current"),
}


def variant(name: str, update: UpdateConfig, n_iterations: int) -> VariantSpec:
    """Build the named advantage-weighted method (awr, marwil, awac, crr, abm, str)."""
    key = name.lower()
    if key not in _TABLE:
        raise ValueError(f"unknown variant {name!r}; expected one of {sorted(_TABLE)}")
    pe, base = _TABLE[key]
    if pe == "behavior" and base == "behavior":
        n_iterations = min(n_iterations, 1)
    return VariantSpec(key, pe, base, update, n_iterations)


@dataclass(eq=False)
class IterationRecord:
    iteration: int
    policy: TabularPolicy
    eta_true: float
    eta_emp: float
    q: np.ndarray
    kl_step: np.ndarray
    tv_step: np.ndarray
    kl_to_beta: np.ndarray
    ood_ratio: float
    q_improve_min: float = float("nan")
    q_improve_max: float = float("nan")
    strict: bool = False
    lambda_at_lower: bool = False
    wall_clock: float = 0.0


@dataclass(eq=False)
class IterationTrace:
    """One record per policy ``pi_1 .. pi_{N+1}``; record 0 is the behavior policy."""

    variant: str
    records: list[IterationRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i) -> IterationRecord:
        return self.records[i]

    @property
    def final(self) -> IterationRecord:
        return self.records[-1]

    @property
    def policies(self) -> list[TabularPolicy]:
        return [r.policy for r in self.records]

    def n_strict_improvements(self) -> int:
        return sum(r.strict for r in self.records[1:])


@dataclass(frozen=True, eq=False)
class SupportOptimum:
    q_star: np.ndarray
    pi_star: TabularPolicy
    iterations_to_converge: int


def _apply_update(base: TabularPolicy, adv: np.ndarray, update: UpdateConfig):
    # shift advantages so they are centered under the anchor; per-state shifts
    # leave both closed forms unchanged
    adv = adv - state_values(adv, base)[:, None]
    if isinstance(update, PenaltyUpdateConfig):
        return penalty_update(base, adv, update)
    return constrained_update(base, adv, update)


class _Evaluator:
    """Exact Q on ``eval_mdp`` for policies defined on the first ``n_states`` states."""

    def __init__(self, eval_mdp: TabularMdp, n_states: int):
        self.mdp = eval_mdp
        self.n = n_states

    def __call__(self, policy: TabularPolicy) -> np.ndarray:
        return exact_q(self.mdp, pad_policy(policy, self.mdp.n_states))[: self.n]

    def eta(self, policy: TabularPolicy) -> float:
        return performance(self.mdp, pad_policy(policy, self.mdp.n_states))


def run_variant(
    spec: VariantSpec,
    eval_mdp: TabularMdp,
    true_mdp: TabularMdp,
    beta: TabularPolicy,
    mask: SupportMask,
    n_iterations: int | None = None,
    *,
    ood_mask: SupportMask | None = None,
    ood_states: np.ndarray | None = None,
    q_estimator: Callable[[TabularPolicy], np.ndarray] | None = None,
) -> IterationTrace:
    """Run one advantage-weighted policy-iteration method.

    ``eval_mdp`` supplies exact Q-values (it may carry extra trailing states,
    such as the empirical sink). ``q_estimator`` replaces the exact evaluation
    used for the advantages, e.g. with fitted Q evaluation; the recorded ``q``
    column always holds the exact table. ``ood_mask``/``ood_states`` select the
    pairs and states used for the OOD ratio (defaults: ``mask``, all states).
    """
    n_iter = spec.n_iterations if n_iterations is None else n_iterations
    if spec.one_step:
        n_iter = min(n_iter, 1)
    S = beta.n_states
    if mask.mask.shape != beta.probs.shape:
        raise ValueError("mask shape does not match behavior policy")
    in_mask = np.where(mask.mask, beta.probs, 0.0).sum(axis=1)
    if np.any(in_mask <= 0):
        raise ValueError(f"behavior policy has no mass inside the mask at state {int(np.argmin(in_mask))}")
    exact = _Evaluator(eval_mdp, S)
    estimate = q_estimator or exact
    ood_mask = ood_mask or mask

    def record(i, policy, prev, q, q_prev, at_lower):
        t0 = time.perf_counter()
        kl_step = kl_rows(policy.probs, prev.probs) if prev is not None else np.zeros(S)
        tv_step = tv_rows(policy.probs, prev.probs) if prev is not None else np.zeros(S)
        rec = IterationRecord(
            iteration=i,
            policy=policy,
            eta_true=performance(true_mdp, pad_policy(policy, true_mdp.n_states)),
            eta_emp=exact.eta(policy),
            q=q,
            kl_step=kl_step,
            tv_step=tv_step,
            kl_to_beta=kl_rows(policy.probs, beta.probs),
            ood_ratio=ood_ratio(policy, ood_mask, states=ood_states),
            lambda_at_lower=at_lower,
        )
        if q_prev is not None:
            diff = q - q_prev
            rec.q_improve_min = float(diff.min())
            rec.q_improve_max = float(diff.max())
            rec.strict = rec.q_improve_max > STRICT_MARGIN
        rec.wall_clock = time.perf_counter() - t0
        return rec

    trace = IterationTrace(spec.name)
    policy = beta
    q = exact(policy)
    trace.records.append(record(0, policy, None, q, None, False))
    for i in range(1, n_iter + 1):
        t0 = time.perf_counter()
        pe = beta if spec.pe_policy == "behavior" else policy
        q_hat = estimate(pe) if q_estimator is not None else (q if pe is policy else exact(pe))
        at_lower = False
        if spec.base_policy == "behavior":
            new, diag = _apply_update(beta, q_hat, spec.update)
        elif spec.base_policy == "projected-current":
            new, diag = _apply_update(support_project(policy, mask), q_hat, spec.update)
        else:
            mid, d1 = _apply_update(beta, q_hat, spec.update)
            new, diag = _apply_update(mid, q_hat, spec.update)
            at_lower = bool(d1.at_lower_bound.any())
        at_lower = at_lower or bool(diag.at_lower_bound.any())
        q_new = exact(new)
        rec = record(i, new, policy, q_new, q, at_lower)
        rec.wall_clock += time.perf_counter() - t0
        trace.records.append(rec)
        policy, q = new, q_new
    return trace


def str_tabular(
    eval_mdp: TabularMdp,
    true_mdp: TabularMdp,
    beta: TabularPolicy,
    mask: SupportMask,
    update: UpdateConfig,
    n_iterations: int,
    **kw,
) -> IterationTrace:
    """Supported trust region: ``pi_{i+1} = update(Proj_mask(pi_i), A^{pi_i})`` from ``pi_1 = beta``."""
    return run_variant(variant("str", update, n_iterations), eval_mdp, true_mdp, beta, mask, **kw)


def pad_mask(mask: SupportMask, n_states: int) -> SupportMask:
    """Extend a mask with all-true rows for extra trailing states."""
    extra = n_states - mask.mask.shape[0]
    if extra <= 0:
        return mask
    rows = np.ones((extra, mask.mask.shape[1]), dtype=bool)
    return SupportMask(np.vstack([mask.mask, rows]), mask.source)


def _greedy_in_mask(q: np.ndarray, mask: np.ndarray, current: np.ndarray | None, tol: float) -> np.ndarray:
    masked = np.where(mask, q, -np.inf)
    best = masked.max(axis=1)
    scale = np.maximum(1.0, np.abs(best))
    near = masked >= (best - tol * scale)[:, None]
    first = near.argmax(axis=1)
    if current is None:
        return first
    keep = near[np.arange(q.shape[0]), current]
    return np.where(keep, current, first)


def support_constrained_optimum(mdp: TabularMdp, mask: SupportMask, tol: float = 1e-10) -> SupportOptimum:
    """Optimal policy and Q-values when actions are restricted to ``mask``.

    Value iteration with the per-state max taken over masked-in actions runs
    until the residual is below ``tol * (1 - gamma)``; the greedy policy is then
    polished by exact policy iteration. Ties go to the lowest action index.
    """
    mask = pad_mask(mask, mdp.n_states)
    m = mask.mask
    empty = np.flatnonzero(~m.any(axis=1))
    if empty.size:
        raise ValueError(f"state {empty[0]} has no in-support action")
    gamma = mdp.gamma
    q = np.zeros((mdp.n_states, mdp.n_actions))
    iters = 0
    while True:
        v = np.where(m, q, -np.inf).max(axis=1)
        nxt = mdp.reward + gamma * (mdp.transition @ v)
        iters += 1
        delta = np.max(np.abs(nxt - q))
        q = nxt
        if delta <= tol * (1.0 - gamma) or iters > 100_000:
            break
    actions = _greedy_in_mask(q, m, None, 1e-12)
    for _ in range(1000):
        pi = TabularPolicy.deterministic(actions, mdp.n_actions)
        q = exact_q(mdp, pi)
        nxt = _greedy_in_mask(q, m, actions, 1e-12)
        if np.array_equal(nxt, actions):
            break
        actions = nxt
        iters += 1
    return SupportOptimum(q, TabularPolicy.deterministic(actions, mdp.n_actions), iters)
