from __future__ import annotations

from app.harness import DEFAULT_SIGMAS, AblationSummary, EvalResult, MetricsRow
from app.plots import plot_ablation, plot_loss_curves, plot_robustness

PNG_MAGIC = b"\x89PNG"


def test_loss_curve_png(tmp_path):
    rows = [
        MetricsRow(step=s, loss=1.0 / s, l_q=0.9 / s, l_tc=0.01, gate=0.5, lr=1e-3, grad_norm=1.0, clipped_norm=1.0)
        for s in range(1, 6)
    ]
    path = plot_loss_curves(rows, tmp_path / "plots" / "loss.png", title="tiny")
    assert path.read_bytes().startswith(PNG_MAGIC)


def test_robustness_and_ablation_png(tmp_path):
    results = [EvalResult(f"gaussian:{s:g}", 1.0 - s, s, s, 4) for s in DEFAULT_SIGMAS]
    assert plot_robustness(results, DEFAULT_SIGMAS, tmp_path / "robust.png").read_bytes().startswith(PNG_MAGIC)
    summaries = [AblationSummary(v, 2, 0.5, 0.1, 0.9, 0.2) for v in (4, 8, 16)]
    assert plot_ablation(summaries, "b_q", tmp_path / "ablate.png").read_bytes().startswith(PNG_MAGIC)
