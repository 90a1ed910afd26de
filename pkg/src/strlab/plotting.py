"""Figures for experiment traces. Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _series(rows, key):
    return [r["iteration"] for r in rows], [r[key] for r in rows]


def plot_learning_curves(traces: dict, path, opt_return: float | None = None):
    """Truncated return per iteration with a one-standard-error band."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, rows in traces.items():
        it, mean = _series(rows, "return_trunc_mean")
        _, se = _series(rows, "return_trunc_se")
        ax.plot(it, mean, label=name)
        ax.fill_between(it, [m - s for m, s in zip(mean, se)], [m + s for m, s in zip(mean, se)], alpha=0.2)
    if opt_return is not None:
        ax.axhline(opt_return, color="k", ls="--", lw=1, label="support optimum")
    ax.set_xlabel("iteration")
    ax.set_ylabel("truncated return")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_metric(traces: dict, key: str, ylabel: str, path, log_scale: bool = False):
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, rows in traces.items():
        ax.plot(*_series(rows, key), label=name)
    if log_scale:
        ax.set_yscale("symlog", linthresh=1e-6)
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_figures(traces: dict, out_dir, opt_return: float | None = None) -> list[Path]:
    """Write the standard figure set into ``out_dir`` and return the paths."""
    out = Path(out_dir)
    paths = [out / "learning_curve.png", out / "ood_ratio.png", out / "kl_to_beta.png"]
    plot_learning_curves(traces, paths[0], opt_return)
    plot_metric(traces, "ood_ratio", "out-of-support probability mass", paths[1])
    plot_metric(traces, "kl_to_beta_mean", "mean KL to behavior", paths[2], log_scale=True)
    return paths
