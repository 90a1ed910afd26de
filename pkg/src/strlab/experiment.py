"""End-to-end experiment pipeline: config, orchestration, and output files."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .algorithms import (
    IterationTrace,
    SupportOptimum,
    run_variant,
    support_constrained_optimum,
    variant,
)
from .data import (
    SupportMask,
    TransitionDataset,
    empirical_mdp,
    estimate_behavior,
    filter_dataset,
    make_rng,
    pad_policy,
    rollout_dataset,
    save_dataset,
    support_mask_from_dataset,
    support_mask_from_policy,
)
from .envs import (
    ACTION_NAMES,
    MazeLayout,
    MazeSpec,
    build_maze,
    build_random_mdp,
    expected_truncated_return,
    truncated_return,
)
from .mdp import TabularMdp, TabularPolicy, performance, validate_mdp
from .theory import (
    BoundReport,
    check_cpo_lower_bound,
    check_density_ceiling,
    check_monotone,
    check_perf_difference,
    check_safe_improvement,
    check_support_invariance,
    check_trust_region,
    write_reports,
)
from .update import ConstrainedUpdateConfig, PenaltyUpdateConfig

log = logging.getLogger(__name__)

TRACE_COLUMNS = (
    "iteration",
    "eta_true",
    "eta_emp",
    "return_trunc_mean",
    "return_trunc_se",
    "ood_ratio",
    "kl_to_beta_mean",
    "kl_step_max",
    "tv_step_max",
    "q_improve_min",
    "q_improve_max",
    "strict_flag",
)
ENV_OUTPUT_DIR = "STRLAB_OUTPUT_DIR"
ENV_LOG_LEVEL = "STRLAB_LOG_LEVEL"


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage


def fmt(x) -> str:
    """Fixed 17-significant-digit rendering used in every delimited output."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


@dataclass(frozen=True)
class RandomMdpSpec:
    n_states: int = 10
    n_actions: int = 3
    branching: int = 3
    reward_sparsity: float = 0.5
    gamma: float = 0.9
    seed: int = 0
    step_limit: int = 25


@dataclass(frozen=True)
class OodFilter:
    """Drop records taking ``action`` in the lower half of the maze."""

    action: str = "right"
    region: str = "lower-half"


@dataclass(frozen=True)
class ExperimentConfig:
    env: MazeSpec | RandomMdpSpec = field(default_factory=MazeSpec)
    behavior: dict = field(default_factory=lambda: {"kind": "uniform-random"})
    dataset_size: int = 10_000
    max_episode_len: int | None = None
    data_start: str = "uniform-free"
    ood_filter: OodFilter | None = field(default_factory=OodFilter)
    variants: tuple = ("str",)
    update: dict = field(default_factory=lambda: {"form": "constrained", "epsilon": 0.05})
    n_iterations: int = 100
    n_eval_rollouts: int = 1000
    init_value: float = 0.0
    seed: int = 0
    output_dir: str = "runs/default"
    plots: bool = True

    @property
    def step_limit(self) -> int:
        return self.env.step_limit

    def update_config(self, v_max: float):
        form = self.update.get("form", "constrained")
        if form == "constrained":
            return ConstrainedUpdateConfig.for_vmax(float(self.update["epsilon"]), v_max)
        if form == "penalty":
            return PenaltyUpdateConfig(float(self.update["alpha"]), v_max)
        raise ValueError(f"unknown update form {form!r}")


def _tuple_cells(cells):
    return [tuple(int(v) for v in c) for c in cells]


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    env_raw = dict(raw.pop("env", {}) or {})
    kind = env_raw.pop("kind", "maze")
    if kind == "maze":
        if "wall_cells" in env_raw:
            env_raw["wall_cells"] = _tuple_cells(env_raw["wall_cells"])
        for key in ("goal_cell", "start_cell"):
            if key in env_raw:
                env_raw[key] = tuple(int(v) for v in env_raw[key])
        env = MazeSpec(**env_raw)
    elif kind == "random":
        env = RandomMdpSpec(**env_raw)
    else:
        raise ValueError(f"unknown env kind {kind!r}")
    ood = raw.pop("ood_filter", {})
    ood_filter = None if ood is None or ood is False else OodFilter(**(ood or {}))
    variants = raw.pop("variants", raw.pop("variant", ("str",)))
    if isinstance(variants, str):
        variants = (variants,)
    unknown = set(raw) - {f for f in ExperimentConfig.__dataclass_fields__}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return ExperimentConfig(env=env, ood_filter=ood_filter, variants=tuple(variants), **raw)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_dict(yaml.safe_load(fh))


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d["env"] = {"kind": "maze" if isinstance(cfg.env, MazeSpec) else "random", **d["env"]}
    if isinstance(cfg.env, MazeSpec):
        d["env"]["wall_cells"] = [list(c) for c in cfg.env.wall_cells]
        d["env"]["goal_cell"] = list(cfg.env.goal_cell)
        d["env"]["start_cell"] = list(cfg.env.start_cell)
    d["variants"] = list(cfg.variants)
    return d


# ----------------------------------------------------------------- pipeline


@dataclass(eq=False)
class Setup:
    """Everything a variant run needs, built once per experiment."""

    true_mdp: TabularMdp
    layout: MazeLayout | None
    behavior: TabularPolicy
    dataset: TransitionDataset
    eval_mdp: TabularMdp
    beta_hat: TabularPolicy
    policy_mask: SupportMask
    data_mask: SupportMask
    visited: np.ndarray
    optimum: SupportOptimum


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except Exception as exc:  # noqa: BLE001 - re-raised with the stage label
                raise StageError(name, exc) from exc

        return inner

    return wrap


@_stage("build_env")
def build_env(cfg: ExperimentConfig):
    if isinstance(cfg.env, MazeSpec):
        mdp, layout = build_maze(cfg.env)
    else:
        e = cfg.env
        mdp = build_random_mdp(e.n_states, e.n_actions, e.branching, e.reward_sparsity, e.gamma, e.seed)
        layout = None
    validate_mdp(mdp)
    return mdp, layout


@_stage("behavior")
def build_behavior(cfg: ExperimentConfig, mdp: TabularMdp) -> TabularPolicy:
    kind = cfg.behavior.get("kind", "uniform-random")
    S, A = mdp.n_states, mdp.n_actions
    if kind == "uniform-random":
        return TabularPolicy.uniform(S, A)
    if kind == "table":
        return TabularPolicy(np.asarray(cfg.behavior["probs"], dtype=float))
    if kind == "random-support":
        rng = make_rng(int(cfg.behavior.get("seed", cfg.seed)))
        keep = rng.random((S, A)) < float(cfg.behavior.get("keep_prob", 0.6))
        keep[np.arange(S), rng.integers(0, A, size=S)] = True
        w = np.where(keep, rng.random((S, A)) + 0.1, 0.0)
        return TabularPolicy(w / w.sum(axis=1, keepdims=True))
    raise ValueError(f"unknown behavior kind {kind!r}")


def _collection_mdp(cfg: ExperimentConfig, mdp: TabularMdp, layout: MazeLayout | None) -> TabularMdp:
    if layout is None or cfg.data_start == "start-cell":
        return mdp
    if cfg.data_start != "uniform-free":
        raise ValueError(f"unknown data_start {cfg.data_start!r}")
    cells = [s for s in layout.free_states() if s != layout.goal_state]
    d0 = np.zeros(mdp.n_states)
    d0[cells] = 1.0 / len(cells)
    return TabularMdp(mdp.transition, mdp.reward, mdp.gamma, d0, mdp.r_max)


def ood_predicate(cfg: ExperimentConfig, layout: MazeLayout | None):
    f = cfg.ood_filter
    if f is None:
        return None
    if layout is None:
        raise ValueError("ood_filter is only defined for maze environments")
    if f.region != "lower-half":
        raise ValueError(f"unknown ood_filter region {f.region!r}")
    action = ACTION_NAMES.index(f.action)
    spec = layout.spec

    def drop(s: int, a: int) -> bool:
        cell = layout.cell_of(s)
        return a == action and cell is not None and spec.lower_half(cell[1])

    return drop


def prepare(cfg: ExperimentConfig) -> Setup:
    mdp, layout = build_env(cfg)
    behavior = build_behavior(cfg, mdp)
    max_len = cfg.max_episode_len or cfg.step_limit
    terminal = [layout.goal_state] if layout is not None else []
    try:
        dataset = rollout_dataset(
            _collection_mdp(cfg, mdp, layout), behavior, cfg.dataset_size, max_len, cfg.seed, terminal
        )
    except Exception as exc:  # noqa: BLE001
        raise StageError("rollout_dataset", exc) from exc
    drop = ood_predicate(cfg, layout)
    if drop is not None:
        dataset = filter_dataset(dataset, drop)
    S, A = mdp.n_states, mdp.n_actions
    try:
        eval_mdp = empirical_mdp(dataset, S, A, mdp.gamma, cfg.init_value, initial_dist=mdp.initial_dist)
        beta_hat = estimate_behavior(dataset, S, A)
        data_mask = support_mask_from_dataset(dataset, S, A)
        policy_mask = support_mask_from_policy(beta_hat)
    except Exception as exc:  # noqa: BLE001
        raise StageError("empirical_mdp", exc) from exc
    try:
        optimum = support_constrained_optimum(eval_mdp, policy_mask)
    except Exception as exc:  # noqa: BLE001
        raise StageError("support_constrained_optimum", exc) from exc
    return Setup(mdp, layout, behavior, dataset, eval_mdp, beta_hat, policy_mask, data_mask, dataset.visited_states(), optimum)


def optimum_policy(setup: Setup) -> TabularPolicy:
    return TabularPolicy(setup.optimum.pi_star.probs[: setup.true_mdp.n_states])


def run_checks(setup: Setup, trace: IterationTrace, update) -> list[BoundReport]:
    """Theory checks appropriate to the variant that produced ``trace``."""
    mdp = setup.eval_mdp
    S = mdp.n_states
    reports: list[BoundReport] = []
    pols = [pad_policy(p, S) for p in trace.policies]
    penalty = isinstance(update, PenaltyUpdateConfig)
    base_is_beta = trace.variant in ("awr", "marwil", "awac", "crr")
    for i in range(1, len(pols)):
        ctx = {"variant": trace.variant, "iteration": i}
        for rep in (check_perf_difference(mdp, pols[i], pols[i - 1]), check_cpo_lower_bound(mdp, pols[i], pols[i - 1])):
            rep.context.update(ctx)
            reports.append(rep)
        if penalty:
            anchor = pols[0] if base_is_beta else pols[i - 1]
            for rep in check_trust_region(pols[i], anchor, update.alpha):
                rep.context.update(ctx)
                reports.append(rep)
            if trace.variant == "str":
                rep = check_safe_improvement(mdp, pols[i], pols[i - 1], update.alpha, update.v_max)
                rep.context.update(ctx)
                reports.append(rep)
    if base_is_beta and not penalty:
        for i, p in enumerate(pols):
            rep = check_density_ceiling(mdp, pols[0], p, update.epsilon)
            rep.context.update({"variant": trace.variant, "iteration": i})
            reports.append(rep)
    if trace.variant == "str":
        rep = check_support_invariance(trace, setup.policy_mask, mdp)
        rep.context["variant"] = trace.variant
        reports.append(rep)
        rep = check_monotone(trace, setup.optimum.q_star)
        rep.context["variant"] = trace.variant
        reports.append(rep)
    return reports


def trace_rows(setup: Setup, trace: IterationTrace, cfg: ExperimentConfig) -> list[dict]:
    rows = []
    visited = setup.visited
    for rec in trace.records:
        mean, se = truncated_return(setup.true_mdp, rec.policy, cfg.step_limit, cfg.n_eval_rollouts, cfg.seed + rec.iteration)
        kl_beta = rec.kl_to_beta[visited] if visited.any() else rec.kl_to_beta
        rows.append(
            {
                "iteration": rec.iteration,
                "eta_true": rec.eta_true,
                "eta_emp": rec.eta_emp,
                "return_trunc_mean": mean,
                "return_trunc_se": se,
                "ood_ratio": rec.ood_ratio,
                "kl_to_beta_mean": float(np.mean(kl_beta)),
                "kl_step_max": float(np.max(rec.kl_step)),
                "tv_step_max": float(np.max(rec.tv_step)),
                "q_improve_min": rec.q_improve_min,
                "q_improve_max": rec.q_improve_max,
                "strict_flag": bool(rec.strict),
            }
        )
    return rows


def write_trace_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for row in rows:
            writer.writerow([fmt(row[c]) for c in TRACE_COLUMNS])


def read_trace_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        out = []
        for row in csv.DictReader(fh):
            out.append({k: (int(v) if k in ("iteration", "strict_flag") else float(v)) for k, v in row.items()})
        return out


def _json_float(x: float):
    x = float(x)
    return float(fmt(x)) if math.isfinite(x) else repr(x)


def summarize(setup: Setup, trace: IterationTrace, reports: list[BoundReport], cfg: ExperimentConfig) -> dict:
    q_star = setup.optimum.q_star[: setup.true_mdp.n_states]
    gap = float(np.max(np.abs(trace.final.q - q_star)))
    pi_opt = optimum_policy(setup)
    return {
        "variant": trace.variant,
        "final_eta_true": _json_float(trace.final.eta_true),
        "final_eta_emp": _json_float(trace.final.eta_emp),
        "eta_opt_support": _json_float(performance(setup.eval_mdp, setup.optimum.pi_star)),
        "eta_opt_support_true": _json_float(performance(setup.true_mdp, pi_opt)),
        "final_return_exact": _json_float(expected_truncated_return(setup.true_mdp, trace.final.policy, cfg.step_limit)),
        "opt_return_exact": _json_float(expected_truncated_return(setup.true_mdp, pi_opt, cfg.step_limit)),
        "final_q_gap_to_opt": _json_float(gap),
        "converged": bool(gap <= 1e-6),
        "n_strict_improvements": int(trace.n_strict_improvements()),
        "n_iterations": len(trace) - 1,
        "max_ood_ratio": _json_float(max(r.ood_ratio for r in trace.records)),
        "n_reports": len(reports),
        "n_hard_failures": sum(r.failed for r in reports),
        "metadata": {
            "dataset_records": len(setup.dataset),
            "visited_states": int(setup.visited.sum()),
            "state_metrics_over": "dataset-visited states",
            "lower_half_rule": "y < height // 2",
            "data_start": cfg.data_start,
            "seed": cfg.seed,
        },
    }


def resolve_output_dir(cfg: ExperimentConfig, override: str | None = None) -> Path:
    return Path(override or os.environ.get(ENV_OUTPUT_DIR) or cfg.output_dir)


def run_experiment(cfg: ExperimentConfig, output_dir: str | None = None) -> int:
    """Run every configured variant and write trace, summary, reports, dataset, figures.

    Returns 0 iff no applicable theory check failed.
    """
    out = resolve_output_dir(cfg, output_dir)
    out.mkdir(parents=True, exist_ok=True)
    setup = prepare(cfg)
    save_dataset(setup.dataset, out / "dataset.csv")
    (out / "config.json").write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")
    update = cfg.update_config(setup.true_mdp.v_max)

    failures = 0
    traces: dict[str, list[dict]] = {}
    for name in cfg.variants:
        target = out if len(cfg.variants) == 1 else out / name
        target.mkdir(parents=True, exist_ok=True)
        try:
            trace = run_variant(
                variant(name, update, cfg.n_iterations),
                setup.eval_mdp,
                setup.true_mdp,
                setup.beta_hat,
                setup.policy_mask,
                ood_mask=setup.data_mask,
                ood_states=setup.visited,
            )
        except Exception as exc:  # noqa: BLE001
            raise StageError("run_variant", exc) from exc
        try:
            reports = run_checks(setup, trace, update)
        except Exception as exc:  # noqa: BLE001
            raise StageError("theory_checks", exc) from exc
        rows = trace_rows(setup, trace, cfg)
        traces[name] = rows
        write_trace_csv(rows, target / "trace.csv")
        summary = summarize(setup, trace, reports, cfg)
        (target / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        write_reports(reports, target / "reports.jsonl")
        failures += summary["n_hard_failures"]
        log.info(
            "%s: final eta %.6f (opt %.6f), %d hard failures",
            name,
            trace.final.eta_true,
            summary["eta_opt_support_true"],
            summary["n_hard_failures"],
        )
    if cfg.plots:
        from .plotting import render_figures

        opt_return = expected_truncated_return(setup.true_mdp, optimum_policy(setup), cfg.step_limit)
        render_figures(traces, out, opt_return=opt_return)
    return 0 if failures == 0 else 1


def run_oracle(cfg: ExperimentConfig, output_dir: str | None = None) -> dict:
    """Compute the support-constrained optimum for the configured data and write ``oracle.json``."""
    setup = prepare(cfg)
    pi = optimum_policy(setup)
    mean, se = truncated_return(setup.true_mdp, pi, cfg.step_limit, cfg.n_eval_rollouts, cfg.seed)
    result = {
        "eta_opt_support": _json_float(performance(setup.eval_mdp, setup.optimum.pi_star)),
        "eta_opt_support_true": _json_float(performance(setup.true_mdp, pi)),
        "return_exact": _json_float(expected_truncated_return(setup.true_mdp, pi, cfg.step_limit)),
        "return_trunc_mean": _json_float(mean),
        "return_trunc_se": _json_float(se),
        "iterations_to_converge": setup.optimum.iterations_to_converge,
        "actions": [int(a) for a in pi.probs.argmax(axis=1)],
    }
    out = resolve_output_dir(cfg, output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "oracle.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


def check_config(cfg: ExperimentConfig) -> None:
    """Validate a config without running it: builds the environment and the update rule."""
    mdp, layout = build_env(cfg)
    build_behavior(cfg, mdp)
    ood_predicate(cfg, layout)
    for name in cfg.variants:
        variant(name, cfg.update_config(mdp.v_max), cfg.n_iterations)
