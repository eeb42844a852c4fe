"""Figure rendering for the command-line report path.

Figures are written next to the delimited artifacts so a run is
inspectable without re-plotting the CSV by hand.  Rendering is headless
(Agg) and every function returns the written path.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

PALETTE = ["#0C5DA5", "#00A08A", "#F2AD00", "#F98400", "#5BBCD6", "#B40F20"]


def _style(ax):
    for spine in ("top", "right"):
        ax.spines[spine].set_visible(False)
    ax.grid(alpha=0.3, linewidth=0.5, linestyle="--")


def save_trajectory_figure(path, traj, controls=None):
    """State components, reaction multipliers, and controls against time."""
    times = traj.times
    n = traj.states.shape[1]
    s = traj.eta.shape[1]
    rows = 3 if controls is not None else 2
    fig, axes = plt.subplots(rows, 1, figsize=(7.0, 2.4 * rows), sharex=True)
    ax = axes[0]
    for k in range(n):
        ax.plot(times, traj.states[:, k], color=PALETTE[k % len(PALETTE)], label=f"x_{k + 1}")
    ax.set_ylabel("state")
    ax.legend(fontsize=8, ncol=min(n, 4))
    _style(ax)
    ax = axes[1]
    for k in range(s):
        ax.step(times, traj.eta[:, k], where="post", color=PALETTE[k % len(PALETTE)], label=f"eta_{k + 1}")
    ax.set_ylabel("reaction")
    ax.legend(fontsize=8, ncol=min(s, 4))
    _style(ax)
    if controls is not None:
        ax = axes[2]
        d = controls.shape[1]
        for k in range(d):
            ax.step(times[:-1], controls[:, k], where="post", color=PALETTE[k % len(PALETTE)], label=f"u_{k + 1}")
        ax.set_ylabel("control")
        ax.legend(fontsize=8, ncol=min(d, 4))
        _style(ax)
    axes[-1].set_xlabel("t")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_convergence_figure(path, table):
    """Log-log refinement errors against the step size."""
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    h = np.asarray(table.h)
    series = [
        ("velocity L2", table.err_vel_l2, PALETTE[0]),
        ("control L2", table.err_ctrl_l2, PALETTE[1]),
        ("node max", table.err_node_max, PALETTE[2]),
    ]
    floor = 1e-17
    for label, col, color in series:
        ax.loglog(h, np.maximum(col, floor), "o-", color=color, label=label)
    ax.loglog(h, h, ":", color="gray", label="order 1")
    ax.set_xlabel("h")
    ax.set_ylabel("error")
    ax.legend(fontsize=8)
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_report_figure(path, report, title):
    """Horizontal bars of condition residuals against their tolerances."""
    names = list(report.conditions)
    values = [report.conditions[k].value for k in names]
    tols = [report.conditions[k].tol for k in names]
    passes = [report.conditions[k].passed for k in names]
    fig, ax = plt.subplots(figsize=(7.0, 0.4 * max(len(names), 4) + 1.2))
    floor = 1e-17
    y = np.arange(len(names))
    colors = [PALETTE[1] if ok else PALETTE[5] for ok in passes]
    ax.barh(y, np.maximum(values, floor), color=colors, height=0.6)
    for yi, tol in zip(y, tols):
        ax.plot([tol, tol], [yi - 0.35, yi + 0.35], color="black", linewidth=1.0)
    ax.set_yticks(y)
    ax.set_yticklabels(names, fontsize=8)
    ax.set_xscale("log")
    ax.set_xlabel("residual (bar) vs tolerance (tick)")
    ax.set_title(f"{title}: {'pass' if report.verdict else 'fail'}", fontsize=10)
    ax.invert_yaxis()
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
