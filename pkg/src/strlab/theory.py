"""Executable checks of the performance and trust-region bounds, reported with slack."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .algorithms import IterationTrace
from .data import SupportMask, pad_policy
from .mdp import (
    TabularMdp,
    TabularPolicy,
    advantage_from_q,
    exact_q,
    kl_rows,
    occupancy,
    performance,
    tv_rows,
)

PERF_TOL = 1e-6
PROB_TOL = 1e-9
Q_MONO_TOL = 1e-8
CONVERGED_TOL = 1e-6


@dataclass
class BoundReport:
    """``lhs <= rhs`` (or the reverse, per ``name``) with ``slack = rhs - lhs``."""

    name: str
    lhs: float
    rhs: float
    slack: float
    passed: bool
    context: dict = field(default_factory=dict)
    applicable: bool = True

    @property
    def failed(self) -> bool:
        return self.applicable and not self.passed

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, (np.floating, float)):
                v = float(v)
                return v if math.isfinite(v) else repr(v)
            if isinstance(v, (np.integer,)):
                return int(v)
            if isinstance(v, (np.bool_,)):
                return bool(v)
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            return v

        body = {
            "name": self.name,
            "lhs": clean(self.lhs),
            "rhs": clean(self.rhs),
            "slack": clean(self.slack),
            "passed": bool(self.passed),
            "applicable": bool(self.applicable),
            "context": clean(self.context),
        }
        return json.dumps(body, sort_keys=True)


def _upper(name, lhs, rhs, tol, **ctx) -> BoundReport:
    """Report for a claim ``lhs <= rhs``."""
    slack = rhs - lhs
    return BoundReport(name, float(lhs), float(rhs), float(slack), bool(slack >= -tol), {"tolerance": tol, **ctx})


def _lower(name, lhs, rhs, tol, **ctx) -> BoundReport:
    """Report for a claim ``lhs >= rhs``; slack is ``lhs - rhs``."""
    slack = lhs - rhs
    return BoundReport(name, float(lhs), float(rhs), float(slack), bool(slack >= -tol), {"tolerance": tol, **ctx})


def improvement_eps(mdp: TabularMdp, pi_new: TabularPolicy, pi_old: TabularPolicy, q_old=None) -> float:
    """``max_s |E_{a ~ pi_new}[A^{pi_old}(s, a)]|``."""
    q_old = exact_q(mdp, pi_old) if q_old is None else q_old
    adv = advantage_from_q(q_old, pi_old)
    return float(np.max(np.abs(np.sum(pi_new.probs * adv, axis=1))))


def check_perf_difference(mdp: TabularMdp, pi_new: TabularPolicy, pi_old: TabularPolicy) -> BoundReport:
    """Exact identity ``eta(pi') - eta(pi) = sum_s d^{pi'}(s) E_{pi'}[A^pi] / (1 - gamma)``."""
    lhs = performance(mdp, pi_new) - performance(mdp, pi_old)
    adv = advantage_from_q(exact_q(mdp, pi_old), pi_old)
    d_new = occupancy(mdp, pi_new).state_occ
    rhs = float(d_new @ np.sum(pi_new.probs * adv, axis=1)) / (1.0 - mdp.gamma)
    err = abs(lhs - rhs)
    return BoundReport(
        "perf_difference",
        lhs,
        rhs,
        PERF_TOL - err,
        err <= PERF_TOL,
        {"tolerance": PERF_TOL, "abs_error": err, "gamma": mdp.gamma},
    )


def check_cpo_lower_bound(mdp: TabularMdp, pi_new: TabularPolicy, pi_old: TabularPolicy) -> BoundReport:
    """``eta(pi') - eta(pi) >= E_{d^pi, pi'}[A^pi - 2 gamma eps TV / (1 - gamma)] / (1 - gamma)``."""
    g = mdp.gamma
    q_old = exact_q(mdp, pi_old)
    adv = advantage_from_q(q_old, pi_old)
    eps = improvement_eps(mdp, pi_new, pi_old, q_old)
    d_old = occupancy(mdp, pi_old).state_occ
    tv = tv_rows(pi_new.probs, pi_old.probs)
    per_state = np.sum(pi_new.probs * adv, axis=1) - 2.0 * g * eps / (1.0 - g) * tv
    rhs = float(d_old @ per_state) / (1.0 - g)
    lhs = performance(mdp, pi_new) - performance(mdp, pi_old)
    return _lower("cpo_lower_bound", lhs, rhs, PERF_TOL, eps_improve=eps, gamma=g)


def density_ceiling(mdp: TabularMdp, epsilon: float) -> float:
    return mdp.v_max * math.sqrt(epsilon) / (math.sqrt(2.0) * (1.0 - mdp.gamma))


def check_density_ceiling(
    mdp: TabularMdp, beta: TabularPolicy, pi: TabularPolicy, epsilon: float
) -> BoundReport:
    """``eta(pi) <= eta(beta) + v_max sqrt(eps) / (sqrt(2) (1 - gamma))`` when ``KL(pi || beta) <= eps`` everywhere."""
    S = mdp.n_states
    beta, pi = pad_policy(beta, S), pad_policy(pi, S)
    max_kl = float(np.max(kl_rows(pi.probs, beta.probs)))
    lhs = performance(mdp, pi)
    rhs = performance(mdp, beta) + density_ceiling(mdp, epsilon)
    rep = _upper("density_ceiling", lhs, rhs, PERF_TOL, epsilon=epsilon, max_kl_to_beta=max_kl, gamma=mdp.gamma)
    if max_kl > epsilon + PROB_TOL:
        rep.applicable = False
        rep.context["reason"] = "KL premise violated"
    return rep


def check_trust_region(pi_new: TabularPolicy, pi_old: TabularPolicy, alpha: float) -> list[BoundReport]:
    """Three per-state distance bounds for a fixed-multiplier update with coefficient ``alpha``."""
    tv = float(np.max(tv_rows(pi_new.probs, pi_old.probs)))
    kl_rev = float(np.max(kl_rows(pi_old.probs, pi_new.probs)))
    kl_fwd = float(np.max(kl_rows(pi_new.probs, pi_old.probs)))
    kl_cap = alpha * (math.exp(alpha) - math.exp(-alpha)) / 2.0
    return [
        _upper("trust_region_tv", tv, alpha, PROB_TOL, alpha=alpha),
        _upper("trust_region_kl_old_new", kl_rev, alpha, PROB_TOL, alpha=alpha),
        _upper("trust_region_kl_new_old", kl_fwd, kl_cap, PROB_TOL, alpha=alpha),
    ]


def safe_improvement_rhs(
    mdp: TabularMdp,
    pi_new: TabularPolicy,
    pi_old: TabularPolicy,
    alpha: float,
    v_max: float,
    eval_error: float = 0.0,
) -> tuple[float, dict]:
    g = mdp.gamma
    q_old = exact_q(mdp, pi_old)
    eps = improvement_eps(mdp, pi_new, pi_old, q_old)
    d_old = occupancy(mdp, pi_old).state_occ
    kl = kl_rows(pi_new.probs, pi_old.probs)
    kl_term = v_max / ((1.0 - g) * alpha) * float(d_old @ kl)
    eps_term = 2.0 * g * eps / (1.0 - g) ** 2 * alpha
    err_term = 2.0 * alpha / (1.0 - g) * eval_error
    return kl_term - eps_term - err_term, {
        "kl_term": kl_term,
        "eps_term": eps_term,
        "eval_error_term": err_term,
        "eps_improve": eps,
    }


def check_safe_improvement(
    mdp: TabularMdp,
    pi_new: TabularPolicy,
    pi_old: TabularPolicy,
    alpha: float,
    v_max: float | None = None,
    eval_error: float | None = None,
    require_eval_error: bool = False,
) -> BoundReport:
    """Per-step lower bound on ``eta(pi_{i+1}) - eta(pi_i)`` for the fixed-multiplier update.

    ``eval_error`` is the measured ``rho^{pi_i}``-weighted L1 error of the
    Q-estimate that produced the update (0 for exact evaluation).
    """
    if eval_error is None:
        if require_eval_error:
            raise ValueError("FQE diagnostics requested but no evaluation error supplied")
        eval_error = 0.0
    v_max = mdp.v_max if v_max is None else v_max
    S = mdp.n_states
    pi_new, pi_old = pad_policy(pi_new, S), pad_policy(pi_old, S)
    rhs, parts = safe_improvement_rhs(mdp, pi_new, pi_old, alpha, v_max, eval_error)
    lhs = performance(mdp, pi_new) - performance(mdp, pi_old)
    return _lower("safe_improvement", lhs, rhs, PERF_TOL, alpha=alpha, eval_error=eval_error, **parts)


def occupancy_support(mdp: TabularMdp, policy: TabularPolicy) -> tuple[np.ndarray, np.ndarray]:
    """Exact supports of ``d^pi`` and ``rho^pi``: states reachable from ``d0`` along positive-probability edges.

    Computed combinatorially so that in-support actions carrying underflow-sized
    mass still count as visited.
    """
    act = policy.probs > 0
    step = np.einsum("sa,sat->st", act.astype(float), (mdp.transition > 0).astype(float)) > 0
    reach = mdp.initial_dist > 0
    while True:
        nxt = reach | step[reach].any(axis=0)
        if np.array_equal(nxt, reach):
            break
        reach = nxt
    return reach, reach[:, None] & act


def check_support_invariance(trace: IterationTrace, beta_mask: SupportMask, mdp: TabularMdp | None = None) -> BoundReport:
    """``supp(pi_i) = supp(beta)`` exactly at every iterate.

    With ``mdp`` given, the supports of the state and state-action occupancies
    must also match those of ``beta``.
    """
    beta_supp = beta_mask.mask
    mismatches = 0
    escapes = 0
    occ_mismatches = 0
    if mdp is not None:
        d_beta, rho_beta = occupancy_support(mdp, pad_policy(trace.records[0].policy, mdp.n_states))
    for rec in trace.records:
        supp = rec.policy.probs > 0
        escapes += int(np.any(supp & ~beta_supp))
        mismatches += int(not np.array_equal(supp, beta_supp))
        if mdp is not None:
            d_pi, rho_pi = occupancy_support(mdp, pad_policy(rec.policy, mdp.n_states))
            same = np.array_equal(d_pi, d_beta) and np.array_equal(rho_pi, rho_beta)
            occ_mismatches += int(not same)
    bad = mismatches + escapes + occ_mismatches
    return BoundReport(
        "support_invariance",
        float(bad),
        0.0,
        float(-bad),
        bad == 0,
        {
            "iterates": len(trace),
            "policy_support_mismatches": mismatches,
            "out_of_support_iterates": escapes,
            "occupancy_support_mismatches": occ_mismatches,
        },
    )


def check_monotone(trace: IterationTrace, q_star: np.ndarray) -> BoundReport:
    """``Q^{pi_{i+1}} >= Q^{pi_i} - 1e-8`` everywhere, strictly somewhere until ``Q*`` is reached."""
    q_star = np.asarray(q_star)[: trace.records[0].q.shape[0]]
    worst = 0.0
    non_strict_before_conv = []
    converged_at = None
    strict_flags = []
    for i, rec in enumerate(trace.records[1:], start=1):
        worst = min(worst, rec.q_improve_min)
        prev_gap = float(np.max(np.abs(trace.records[i - 1].q - q_star)))
        if prev_gap <= CONVERGED_TOL:
            if converged_at is None:
                converged_at = i - 1
        elif not rec.strict:
            non_strict_before_conv.append(i)
        strict_flags.append(bool(rec.strict))
    final_gap = float(np.max(np.abs(trace.final.q - q_star)))
    if converged_at is None and final_gap <= CONVERGED_TOL:
        converged_at = len(trace) - 1
    passed = worst >= -Q_MONO_TOL and not non_strict_before_conv
    return BoundReport(
        "monotone_improvement",
        -worst,
        Q_MONO_TOL,
        Q_MONO_TOL + worst,
        passed,
        {
            "tolerance": Q_MONO_TOL,
            "min_q_increase": worst,
            "non_strict_iterations": non_strict_before_conv,
            "converged_iteration": converged_at,
            "final_gap_to_optimum": final_gap,
            "strict_flags": strict_flags,
        },
    )


def write_reports(reports, path) -> None:
    with open(path, "w") as fh:
        for rep in reports:
            fh.write(rep.to_json() + "\n")
