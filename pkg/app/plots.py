"""
Static PNG figures for training runs, robustness sweeps and ablations.

Uses the non-interactive Agg backend; nothing is ever shown on screen.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from app.harness import AblationSummary, EvalResult, MetricsRow  # noqa: E402
from app.logs import log_event  # noqa: E402


def save_plot(fig: plt.Figure, path: Path) -> Path:
    """Write `fig` to `path` and close it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fig.savefig(path, bbox_inches="tight", dpi=120)
        log_event("INFO", "PLOT_SAVED", source="plots", path=path)
    finally:
        plt.close(fig)
    return path


def plot_loss_curves(rows: Sequence[MetricsRow], path: Path, *, title: str = "") -> Path:
    """Losses against step, with the gate and learning rate in a second panel."""
    steps = [r.step for r in rows]
    fig, (ax_loss, ax_gate) = plt.subplots(1, 2, figsize=(11, 4))
    ax_loss.plot(steps, [r.loss for r in rows], label="total")
    ax_loss.plot(steps, [r.l_q for r in rows], label="flow matching")
    if any(r.l_tc > 0 for r in rows):
        ax_loss.plot(steps, [r.l_tc for r in rows], label="complexity hinge")
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss")
    ax_loss.set_yscale("log")
    ax_loss.grid(True, which="both", linestyle="--", linewidth=0.5)
    ax_loss.legend()

    ax_gate.plot(steps, [r.gate for r in rows], color="tab:green", label="gate g")
    ax_gate.set_xlabel("step")
    ax_gate.set_ylim(0.0, 1.05)
    ax_lr = ax_gate.twinx()
    ax_lr.plot(steps, [r.lr for r in rows], color="tab:gray", linestyle=":", label="lr")
    ax_gate.legend(loc="lower left")
    ax_lr.legend(loc="lower right")
    if title:
        fig.suptitle(title)
    return save_plot(fig, path)


def plot_robustness(results: Sequence[EvalResult], sigmas: Sequence[float], path: Path, *, title: str = "") -> Path:
    """Success rate and mean error against gaussian noise sigma."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(sigmas, [r.success_rate for r in results], marker="o", label="success rate")
    ax.set_xlabel("noise sigma")
    ax.set_ylabel("success rate")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(True, linestyle="--", linewidth=0.5)
    ax_err = ax.twinx()
    ax_err.plot(sigmas, [r.mean_error for r in results], marker="s", color="tab:red", label="mean step error")
    ax_err.set_ylabel("mean step error")
    ax.legend(loc="upper right")
    if title:
        ax.set_title(title)
    return save_plot(fig, path)


def plot_ablation(summaries: Sequence[AblationSummary], knob: str, path: Path) -> Path:
    """Held-out success per knob value, with the seed spread as error bars."""
    fig, ax = plt.subplots(figsize=(max(4.0, 0.7 * len(summaries) + 2.0), 4))
    labels = [str(s.value) for s in summaries]
    ax.bar(labels, [s.mean_heldout for s in summaries], yerr=[s.std_heldout for s in summaries], capsize=4)
    ax.set_xlabel(knob)
    ax.set_ylabel("held-out success")
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, axis="y", linestyle="--", linewidth=0.5)
    return save_plot(fig, path)
