"""Closed-form exponentiated-advantage policy updates and support projections."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .data import SupportMask
from .mdp import TabularPolicy, kl_rows

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
CENTERING_TOL = 1e-8
TINY = np.finfo(float).tiny


class UpdateError(ValueError):
    pass


@dataclass(frozen=True)
class ConstrainedUpdateConfig:
    """KL radius ``epsilon`` and the search bracket for the per-state multiplier."""

    epsilon: float
    lambda_bracket: tuple[float, float] = (1e-4, 1e3)
    dual_tol: float = 1e-10
    tie_tol: float = 1e-12

    def __post_init__(self):
        lo, hi = self.lambda_bracket
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < lo < hi:
            raise ValueError("lambda bracket must satisfy 0 < lambda_min < lambda_max")
        if not self.dual_tol > 0:
            raise ValueError("dual_tol must be positive")

    @classmethod
    def for_vmax(cls, epsilon: float, v_max: float, **kw) -> "ConstrainedUpdateConfig":
        """Bracket scaled to the value range: ``[1e-4 v_max, 1e3 v_max]``."""
        return cls(epsilon, (1e-4 * v_max, 1e3 * v_max), **kw)


@dataclass(frozen=True)
class PenaltyUpdateConfig:
    """Fixed-multiplier update ``pi * exp(alpha * A / v_max)``."""

    alpha: float
    v_max: float

    def __post_init__(self):
        if not 0 < self.alpha <= 0.48:
            raise ValueError(f"alpha must lie in (0, 0.48], got {self.alpha}")
        if not self.v_max > 0:
            raise ValueError("v_max must be positive")


@dataclass(frozen=True, eq=False)
class StateUpdateDiagnostics:
    lambda_star: np.ndarray
    z_value: np.ndarray
    log_z: np.ndarray
    kl_achieved: np.ndarray
    constraint_active: np.ndarray
    at_lower_bound: np.ndarray


# ---------------------------------------------------------------- dual problem


def _masked_inputs(pi_base: np.ndarray, adv: np.ndarray):
    support = pi_base > 0
    with np.errstate(divide="ignore"):
        log_p = np.where(support, np.log(np.where(support, pi_base, 1.0)), -np.inf)
    return support, log_p, np.where(support, adv, 0.0)


def _tilt(log_p, adv, lam):
    """Log-probabilities of ``p * exp(adv / lam) / Z`` and ``log Z``; ``lam`` broadcasts per row."""
    logits = log_p + adv / lam
    log_z = logsumexp(logits, axis=-1, keepdims=True)
    return logits - log_z, log_z[..., 0]


def _tilt_kl(log_p, adv, lam):
    log_q, log_z = _tilt(log_p, adv, lam)
    q = np.exp(log_q)
    mean_adv = np.sum(q * adv, axis=-1)
    lam = np.broadcast_to(np.asarray(lam)[..., 0] if np.ndim(lam) else lam, mean_adv.shape)
    kl = np.maximum(mean_adv / lam - log_z, 0.0)
    var = np.maximum(np.sum(q * adv**2, axis=-1) - mean_adv**2, 0.0)
    return kl, var, q, log_z


def dual_objective(pi_base_row, adv_row, epsilon: float, lam: float) -> float:
    """``epsilon * lam + lam * log sum_a pi_base(a) exp(A(a) / lam)`` in log-sum-exp form."""
    if not lam > 0:
        raise UpdateError(f"lambda must be positive, got {lam}")
    _, log_p, adv = _masked_inputs(np.asarray(pi_base_row, float), np.asarray(adv_row, float))
    return float(epsilon * lam + lam * logsumexp(log_p + adv / lam))


def golden_section_minimize(f, lo, hi, tol: float, max_iter: int = 200):
    """Vectorized golden-section search; ``f`` maps an array of points to values.

    Each entry of ``lo``/``hi`` is an independent unimodal problem. Returns the
    final brackets ``(lo, hi)``.
    """
    a = np.array(lo, dtype=float)
    b = np.array(hi, dtype=float)
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if np.all(b - a <= tol):
            break
        left = fc <= fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = b - INV_PHI * (b - a)
        new_d = a + INV_PHI * (b - a)
        c_next = np.where(left, new_c, d)
        d_next = np.where(left, c, new_d)
        probe = np.where(left, c_next, d_next)
        fp = f(probe)
        fc, fd = np.where(left, fp, fd), np.where(left, fc, fp)
        c, d = c_next, d_next
    return a, b


def _keep_support(new: np.ndarray, support: np.ndarray) -> np.ndarray:
    """Zero stays zero and positive stays positive.

    Tilted entries that underflow are raised to the smallest normal double and
    the row is renormalized; the perturbation is below any reported tolerance.
    """
    out = np.where(support, np.maximum(new, TINY), 0.0)
    return out / out.sum(axis=1, keepdims=True)


def _solve_rows(pi_base: np.ndarray, adv: np.ndarray, config: ConstrainedUpdateConfig):
    """Per-row dual solve. Returns ``(new_probs, diagnostics)``."""
    if not np.all(np.isfinite(adv)):
        s = int(np.argwhere(~np.isfinite(adv))[0, 0])
        raise UpdateError(f"non-finite advantage in state {s}")
    n = pi_base.shape[0]
    eps = config.epsilon
    lam_lo, lam_hi = config.lambda_bracket
    support, log_p, adv_m = _masked_inputs(pi_base, adv)

    spread = np.where(support, adv, -np.inf).max(axis=1) - np.where(support, adv, np.inf).min(axis=1)
    scale = np.maximum(1.0, np.abs(adv_m).max(axis=1))
    flat = spread <= config.tie_tol * scale

    lam = np.full(n, lam_hi)
    active = np.zeros(n, dtype=bool)
    at_lower = np.zeros(n, dtype=bool)
    new = pi_base.copy()
    log_z = np.zeros(n)

    rows = np.flatnonzero(~flat)
    if rows.size:
        lp, av = log_p[rows], adv_m[rows]
        kl_lo, *_ = _tilt_kl(lp, av, np.full((rows.size, 1), lam_lo))
        kl_hi, *_ = _tilt_kl(lp, av, np.full((rows.size, 1), lam_hi))
        # dual derivative is eps - KL(pi_lambda || pi_base), and KL decreases in lambda;
        # when even lambda_min leaves KL below eps the dual minimizer is lambda_min itself
        at_lo = kl_lo <= eps
        at_hi = kl_hi >= eps
        inner = ~at_lo & ~at_hi
        lam_rows = np.where(at_lo, lam_lo, lam_hi)

        if inner.any():
            ip, ia = lp[inner], av[inner]
            k = ip.shape[0]

            def g(u):
                lam_u = np.exp(u)[:, None]
                _, lz = _tilt(ip, ia, lam_u)
                return eps * lam_u[:, 0] + lam_u[:, 0] * lz

            u_lo, u_hi = golden_section_minimize(
                g, np.full(k, math.log(lam_lo)), np.full(k, math.log(lam_hi)), tol=config.dual_tol
            )
            # golden section stalls near sqrt(machine eps) on a flat minimum;
            # finish with safeguarded Newton on the stationarity condition KL = eps
            a = np.full(k, math.log(lam_lo))
            b = np.full(k, math.log(lam_hi))
            u = 0.5 * (u_lo + u_hi)
            for _ in range(100):
                lam_u = np.exp(u)
                kl, var, _, _ = _tilt_kl(ip, ia, lam_u[:, None])
                h = kl - eps
                a = np.where(h > 0, u, a)
                b = np.where(h > 0, b, u)
                slope = -var / lam_u**2
                with np.errstate(divide="ignore", invalid="ignore"):
                    step = np.where(slope < 0, h / slope, 0.0)
                cand = u - step
                bad = ~np.isfinite(cand) | (cand <= a) | (cand >= b)
                u_next = np.where(bad, 0.5 * (a + b), cand)
                if np.all(np.abs(u_next - u) <= 1e-15 * np.maximum(1.0, np.abs(u))) or np.all(b - a <= 1e-15):
                    u = u_next
                    break
                u = u_next
            lam_rows[inner] = np.exp(u)

        _, _, q, lz = _tilt_kl(lp, av, lam_rows[:, None])
        new[rows] = _keep_support(q, support[rows])
        log_z[rows] = lz
        lam[rows] = lam_rows
        active[rows] = ~at_lo
        at_lower[rows] = at_lo

    kl = kl_rows(new, pi_base)
    with np.errstate(over="ignore"):
        z = np.exp(log_z)
    diag = StateUpdateDiagnostics(lam, z, log_z, kl, active, at_lower)
    return new, diag


def dual_solve(pi_base_row, adv_row, config: ConstrainedUpdateConfig):
    """Minimize the convex dual for one state. Returns ``(lambda_star, diagnostics)``."""
    p = np.asarray(pi_base_row, float)[None, :]
    a = np.asarray(adv_row, float)[None, :]
    _, diag = _solve_rows(p, a, config)
    return float(diag.lambda_star[0]), diag


def constrained_update(pi_base: TabularPolicy, adv: np.ndarray, config: ConstrainedUpdateConfig):
    """KL-ball maximizer of the expected advantage, state by state.

    ``pi_new = pi_base * exp(A / lambda*) / Z`` with ``lambda*`` from the dual.
    Zero entries of ``pi_base`` stay exactly zero. When ``A`` is constant on the
    support the update returns ``pi_base`` unchanged.
    """
    adv = np.asarray(adv, dtype=float)
    if adv.shape != pi_base.probs.shape:
        raise UpdateError(f"advantage shape {adv.shape} != policy shape {pi_base.probs.shape}")
    new, diag = _solve_rows(pi_base.probs, adv, config)
    return TabularPolicy(new), diag


def penalty_update(pi_base: TabularPolicy, adv: np.ndarray, config: PenaltyUpdateConfig):
    """``pi_new ∝ pi_base * exp(alpha * A / v_max)``; requires ``pi_base``-centered advantages."""
    adv = np.asarray(adv, dtype=float)
    p = pi_base.probs
    if adv.shape != p.shape:
        raise UpdateError(f"advantage shape {adv.shape} != policy shape {p.shape}")
    support = p > 0
    adv = np.where(support, adv, 0.0)
    mean = np.sum(p * adv, axis=1)
    off = np.flatnonzero(np.abs(mean) > CENTERING_TOL * max(1.0, config.v_max))
    if off.size:
        raise UpdateError(f"advantages not centered under pi_base at state {off[0]} (mean {mean[off[0]]:.3e})")
    w = p * np.exp(config.alpha * adv / config.v_max)
    z = w.sum(axis=1)
    new = _keep_support(w / z[:, None], support)
    n = p.shape[0]
    diag = StateUpdateDiagnostics(
        lambda_star=np.full(n, config.v_max / config.alpha),
        z_value=z,
        log_z=np.log(z),
        kl_achieved=kl_rows(new, p),
        constraint_active=np.zeros(n, dtype=bool),
        at_lower_bound=np.zeros(n, dtype=bool),
    )
    return TabularPolicy(new), diag


def support_project(policy: TabularPolicy, mask: SupportMask) -> TabularPolicy:
    """Restrict each row to ``mask`` and renormalize."""
    kept = np.where(mask.mask, policy.probs, 0.0)
    mass = kept.sum(axis=1)
    empty = np.flatnonzero(mass <= 0)
    if empty.size:
        raise UpdateError(f"policy has no in-support mass at state {empty[0]}; projection undefined")
    return TabularPolicy(kept / mass[:, None])


def is_weighted_projection(
    dataset_policy: TabularPolicy,
    pi_i: TabularPolicy,
    weights: np.ndarray,
    mask: SupportMask,
    self_normalize: bool = False,
) -> TabularPolicy:
    """Exact maximizer of the importance-weighted imitation objective.

    Per state the objective is ``sum_a beta(a) * [pi_i(a)/beta(a)] * f(a) * log pi(a)``
    over in-mask actions, maximized by the normalized weights. With
    ``self_normalize`` the ratios are first divided by their ``beta``-mean,
    which only rescales each state's weights.
    """
    weights = np.asarray(weights, dtype=float)
    if not (np.all(np.isfinite(weights)) and np.all(weights > 0)):
        raise UpdateError("importance weights must be finite and positive")
    beta = dataset_policy.probs
    sampled = mask.mask & (beta > 0)
    ratio = np.divide(pi_i.probs, beta, out=np.zeros_like(beta), where=sampled)
    if self_normalize:
        norm = np.sum(beta * ratio, axis=1, keepdims=True)
        ratio = np.divide(ratio, norm, out=np.zeros_like(ratio), where=norm > 0)
    w = np.where(sampled, beta * ratio * weights, 0.0)
    total = w.sum(axis=1)
    empty = np.flatnonzero(total <= 0)
    if empty.size:
        raise UpdateError(f"policy has no in-support mass at state {empty[0]}; projection undefined")
    return TabularPolicy(w / total[:, None])
