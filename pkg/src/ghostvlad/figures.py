"""Figure rendering for the report-producing commands.

Everything draws through the Agg backend straight to files; no display
is ever opened.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)


def format_count(value: float) -> str:
    """1452704480 -> '1.45 G'."""
    for scale, suffix in ((1e9, "G"), (1e6, "M"), (1e3, "k")):
        if abs(value) >= scale:
            return f"{value / scale:.2f} {suffix}"
    return f"{value:.0f}"


def cost_comparison_figure(baseline, candidate, path) -> Path:
    """Side-by-side parameter and FLOP bars for candidate vs baseline."""
    from .costmodel import compare_costs

    path = Path(path)
    comparison = compare_costs(baseline, candidate)
    reports = (baseline, candidate)
    names = [r.title for r in reports]
    panels = (
        ("Parameters", [r.total_params for r in reports], comparison.params_reduction),
        ("FLOPs", [r.total_flops for r in reports], comparison.flops_reduction),
    )

    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, (title, values, reduction) in zip(axes, panels):
        bars = ax.bar(names, values, color=("#8c8c8c", "#2a7fb8"), width=0.6)
        for bar, value in zip(bars, values):
            ax.annotate(
                format_count(value),
                (bar.get_x() + bar.get_width() / 2, value),
                ha="center",
                va="bottom",
                fontsize=9,
            )
        ax.set_title(f"{title}  (−{reduction:.2f}%)")
        ax.set_ylim(0, max(values) * 1.18)
        ax.tick_params(axis="x", labelrotation=12, labelsize=8)
        ax.margins(x=0.15)
    fig.suptitle(f"{candidate.title} vs {baseline.title}")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def recall_curve_figure(series: dict, path, tolerance_m: float | None = None) -> Path:
    """Recall@N curves, one line per named series.

    ``series`` maps a label to {N: recall}; all recalls are in [0, 1].
    """
    if not series:
        raise ValueError("need at least one series")
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, recalls in series.items():
        ns = sorted(recalls)
        ax.plot(ns, [recalls[n] for n in ns], marker="o", label=label)
    ax.set_xlabel("N")
    ax.set_ylabel("recall@N")
    ax.set_ylim(0.0, 1.05)
    ax.set_xticks(sorted({n for r in series.values() for n in r}))
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right")
    title = "Retrieval recall"
    if tolerance_m is not None:
        title += f" (tolerance {tolerance_m:g} m)"
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
