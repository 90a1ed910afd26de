"""Acceptance criteria, each at its stated tolerance. One summary line per criterion is printed."""

import math
import time

import numpy as np
import pytest

from builders import exhaustive_dataset, random_instance, random_policy
from conftest import record_acceptance
from oracles import grid_lambda, kl, tilted
from strlab.algorithms import run_variant, str_tabular, support_constrained_optimum, variant
from strlab.data import make_rng
from strlab.envs import build_random_mdp, expected_truncated_return
from strlab.experiment import ExperimentConfig, optimum_policy, prepare
from strlab.fqe import FeatureMap, FqeBoundInputs, fqe_bound, fqe_error, fqe_run, measured_concentrability
from strlab.mdp import TabularPolicy, exact_q, occupancy
from strlab.theory import (
    check_cpo_lower_bound,
    check_density_ceiling,
    check_perf_difference,
    check_safe_improvement,
    check_trust_region,
)
from strlab.update import ConstrainedUpdateConfig, PenaltyUpdateConfig, constrained_update, penalty_update


@pytest.fixture(scope="module")
def maze():
    t0 = time.perf_counter()
    setup = prepare(ExperimentConfig())
    return setup, time.perf_counter() - t0


def maze_run(setup, name, update, n_iterations=100):
    return run_variant(
        variant(name, update, n_iterations),
        setup.eval_mdp,
        setup.true_mdp,
        setup.beta_hat,
        setup.policy_mask,
        ood_mask=setup.data_mask,
        ood_states=setup.visited,
    )


def test_criterion_1_maze_replication(maze):
    setup, t_setup = maze
    t0 = time.perf_counter()
    update = ConstrainedUpdateConfig.for_vmax(0.05, setup.true_mdp.v_max)
    traces = {name: maze_run(setup, name, update) for name in ("str", "awr", "awac")}
    elapsed = t_setup + time.perf_counter() - t0

    step_limit = setup.layout.spec.step_limit
    target = expected_truncated_return(setup.true_mdp, optimum_policy(setup), step_limit)
    ret = {k: expected_truncated_return(setup.true_mdp, t.final.policy, step_limit) for k, t in traces.items()}
    ood = {k: max(r.ood_ratio for r in t.records) for k, t in traces.items()}
    gap = {k: target - v for k, v in ret.items()}
    ok = (
        len(setup.dataset) <= 10_000
        and ood["str"] == 0.0
        and abs(ret["str"] - target) <= 1e-6
        and ood["awr"] == 0.0
        and ood["awac"] == 0.0
        and gap["awac"] > gap["str"]
        and elapsed < 60
    )
    record_acceptance(
        1,
        "maze",
        ok,
        f"oracle return {target:.6f}; STR {ret['str']:.6f} (OOD max {ood['str']}); "
        f"AWAC {ret['awac']:.6f} (OOD {ood['awac']}); AWR {ret['awr']:.6f} (OOD {ood['awr']}); {elapsed:.1f}s",
    )
    assert ok


def test_criterion_2_strict_improvement():
    t0 = time.perf_counter()
    failures = []
    worst_drop = 0.0
    worst_gap = 0.0
    for seed in range(50):
        mdp, beta, mask = random_instance(seed)
        trace = str_tabular(mdp, mdp, beta, mask, ConstrainedUpdateConfig.for_vmax(0.05, mdp.v_max), 500)
        q_star = support_constrained_optimum(mdp, mask).q_star
        drop = min(r.q_improve_min for r in trace.records[1:])
        non_strict = [
            i
            for i in range(1, len(trace))
            if np.max(np.abs(trace[i - 1].q - q_star)) > 1e-6 and not trace[i].q_improve_max > 1e-8
        ]
        gap = float(np.max(np.abs(trace.final.q - q_star)))
        worst_drop, worst_gap = min(worst_drop, drop), max(worst_gap, gap)
        if drop < -1e-8 or non_strict or gap > 1e-3:
            failures.append((seed, len(non_strict), gap))
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 120
    record_acceptance(
        2,
        "random MDPs",
        ok,
        f"min Q increase {worst_drop:.2e}; max final gap {worst_gap:.2e}; "
        f"instances failing (seed, non-strict iterations, gap): {failures}; {elapsed:.1f}s",
    )
    assert ok


def test_criterion_3_trust_region_random():
    t0 = time.perf_counter()
    rng = make_rng(33)
    violations = 0
    worst_ratio = 0.0
    for i in range(1000):
        alpha = (0.01, 0.1, 0.3, 0.48)[i % 4]
        n = int(rng.integers(2, 6))
        pi = random_policy(rng, 1, n, keep_prob=0.8)
        adv = rng.uniform(-10, 10, size=(1, n))
        adv = adv - (pi.probs * adv).sum()
        adv *= min(1.0, 10.0 / np.abs(adv).max())
        new, _ = penalty_update(pi, adv, PenaltyUpdateConfig(alpha, 10.0))
        reps = check_trust_region(new, pi, alpha)
        violations += sum(r.failed for r in reps)
        worst_ratio = max(worst_ratio, reps[2].lhs / reps[2].rhs)
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and elapsed < 10
    record_acceptance(
        3, "1000 random updates", ok, f"{violations} violations; max KL/bound {worst_ratio:.3f}; {elapsed:.2f}s"
    )
    assert ok


def test_criterion_3_half_half_tightness():
    alpha, v_max = 0.48, 10.0
    pi = TabularPolicy(np.array([[0.5, 0.5]]))
    new, _ = penalty_update(pi, np.array([[v_max, -v_max]]), PenaltyUpdateConfig(alpha, v_max))
    kl_fwd = check_trust_region(new, pi, alpha)[2]
    closed_form = alpha * math.tanh(alpha) - math.log(math.cosh(alpha))
    ratio = kl_fwd.lhs / kl_fwd.rhs
    ok = ratio >= 0.95
    record_acceptance(
        3,
        "half-half extremal",
        ok,
        f"KL(new||old) {kl_fwd.lhs:.6f} (closed form {closed_form:.6f}) vs bound {kl_fwd.rhs:.6f}: "
        f"{100 * ratio:.1f}% of the bound, 95% required",
    )
    assert ok


def test_criterion_4_density_ceiling(maze):
    setup, _ = maze
    t0 = time.perf_counter()
    eps = 0.05
    worst = -np.inf
    checked = 0
    cases = [(setup.eval_mdp, setup.beta_hat, setup.policy_mask, setup.true_mdp.v_max)]
    for seed in range(20):
        mdp, beta, mask = random_instance(100 + seed)
        cases.append((mdp, beta, mask, mdp.v_max))
    for mdp, beta, mask, v_max in cases:
        for name in ("awac", "awr"):
            trace = run_variant(variant(name, ConstrainedUpdateConfig.for_vmax(eps, v_max), 50), mdp, mdp, beta, mask)
            for rec in trace.records:
                rep = check_density_ceiling(mdp, beta, rec.policy, eps)
                worst = max(worst, rep.lhs - rep.rhs)
                checked += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 60
    record_acceptance(4, "AWAC/AWR", ok, f"{checked} iterates; max eta - ceiling {worst:.4f}; {elapsed:.1f}s")
    assert ok


def test_criterion_5_performance_difference():
    t0 = time.perf_counter()
    rng = make_rng(55)
    worst_id = 0.0
    worst_cpo = np.inf
    for i in range(200):
        S, A = int(rng.integers(2, 15)), int(rng.integers(2, 5))
        mdp = build_random_mdp(S, A, min(3, S), 0.4, float(rng.choice([0.5, 0.9, 0.95])), seed=i)
        p_new = random_policy(rng, S, A, keep_prob=0.8)
        p_old = random_policy(rng, S, A)
        ident = check_perf_difference(mdp, p_new, p_old)
        cpo = check_cpo_lower_bound(mdp, p_new, p_old)
        worst_id = max(worst_id, abs(ident.lhs - ident.rhs))
        worst_cpo = min(worst_cpo, cpo.lhs - cpo.rhs)
    elapsed = time.perf_counter() - t0
    ok = worst_id <= 1e-6 and worst_cpo >= -1e-6 and elapsed < 30
    record_acceptance(
        5, "identity and lower bound", ok, f"max |lhs-rhs| {worst_id:.2e}; min CPO slack {worst_cpo:.3e}; {elapsed:.1f}s"
    )
    assert ok


def test_criterion_6_dual_correctness():
    t0 = time.perf_counter()
    rng = make_rng(66)
    worst_tv = 0.0
    worst_kl = 0.0
    n_active = 0
    for _ in range(500):
        n = int(rng.integers(2, 8))
        p = rng.dirichlet(np.ones(n))
        if rng.random() < 0.3:
            p[rng.integers(0, n)] = 0.0
            p /= p.sum()
        a = rng.normal(size=n) * rng.uniform(0.1, 5)
        eps = float(rng.choice([0.01, 0.05, 0.1, 0.5, 1.0]))
        cfg = ConstrainedUpdateConfig.for_vmax(eps, 10.0)
        new, diag = constrained_update(TabularPolicy(p[None]), a[None], cfg)
        ref = tilted(p, a, grid_lambda(p, a, eps, *cfg.lambda_bracket))
        worst_tv = max(worst_tv, 0.5 * float(np.abs(ref - new.probs[0]).sum()))
        if diag.constraint_active[0]:
            n_active += 1
            worst_kl = max(worst_kl, abs(kl(new.probs[0], p) - eps))
    elapsed = time.perf_counter() - t0
    ok = worst_kl <= 10 * 1e-10 and worst_tv <= 1e-6 and elapsed < 10
    record_acceptance(
        6, "500 states", ok, f"{n_active} active; max |KL-eps| {worst_kl:.2e}; max TV to grid {worst_tv:.2e}; {elapsed:.1f}s"
    )
    assert ok


def test_criterion_7_fqe():
    t0 = time.perf_counter()
    worst_match = 0.0
    worst_excess = -np.inf
    violations = 0
    for trial in range(100):
        rng = make_rng(700 + trial)
        S, A = int(rng.integers(3, 11)), int(rng.integers(2, 4))
        mdp = build_random_mdp(S, A, min(3, S), 0.5, 0.9, seed=trial)
        pi = random_policy(rng, S, A)
        ds = exhaustive_dataset(mdp, 20, seed=trial)
        features = FeatureMap.one_hot(S, A)
        res = fqe_run(ds, pi, features, 20, ridge=0.0)
        P = ds.counts / ds.counts.sum(axis=2, keepdims=True)
        f = np.zeros((S, A))
        for j in range(1, 21):
            f = np.clip(mdp.reward + 0.9 * P @ (pi.probs * f).sum(axis=1), 0, mdp.v_max)
            worst_match = max(worst_match, float(np.abs(res.q_table(j) - f).max()))
        err = fqe_error(res, exact_q(mdp, pi), occupancy(mdp, pi))
        worst_excess = max(worst_excess, err - 0.9**20 * mdp.v_max)
        c = measured_concentrability(mdp, pi, ds)
        bound = fqe_bound(FqeBoundInputs(0.05, float(features.dim), c, 0.0, 20, len(ds), 0.9, mdp.v_max))
        violations += err > bound
    elapsed = time.perf_counter() - t0
    ok = worst_match <= 1e-8 and worst_excess <= 1e-6 and violations <= 5 and elapsed < 60
    record_acceptance(
        7,
        "FQE",
        ok,
        f"max iterate mismatch {worst_match:.2e}; max error - g^20 Vmax {worst_excess:.3f}; "
        f"bound violations {violations}/100; {elapsed:.1f}s",
    )
    assert ok


def test_criterion_8_safe_improvement(maze):
    setup, _ = maze
    t0 = time.perf_counter()
    alpha = 0.1
    trace = maze_run(setup, "str", PenaltyUpdateConfig(alpha, setup.true_mdp.v_max))
    slacks = [
        check_safe_improvement(setup.eval_mdp, trace[i].policy, trace[i - 1].policy, alpha).slack
        for i in range(1, len(trace))
    ]
    elapsed = time.perf_counter() - t0
    ok = min(slacks) >= 0 and elapsed < 60
    record_acceptance(8, "maze STR alpha=0.1", ok, f"{len(slacks)} steps; min slack {min(slacks):.3e}; {elapsed:.1f}s")
    assert ok
