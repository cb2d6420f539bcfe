"""Figure rendering for the report path. Everything lands in files; no
interactive backends."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .engine import RunReport  # noqa: E402


def render_accuracy_curves(reports: list[RunReport], path,
                           seeds: list[int] | None = None) -> None:
    """Accuracy-versus-step curves, one line per report, saved as an image."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for i, rep in enumerate(reports):
        seed = seeds[i] if seeds else rep.config.get("seed", "?")
        steps = range(1, rep.n_steps + 1)
        ax.plot(steps, rep.step_accs, marker="o", markersize=3.5,
                label=f"{rep.strategy} (seed {seed})")
    ax.set_xlabel("step")
    ax.set_ylabel("cumulative test accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.set_xticks(list(range(1, reports[0].n_steps + 1)))
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8, loc="lower left")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_ablation_bars(rows: list[dict], path) -> None:
    """Average/whole accuracy bars per ablation variant."""
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    labels = [r["variant"] for r in rows]
    x = range(len(rows))
    width = 0.38
    ax.bar([i - width / 2 for i in x], [r["average_acc"] for r in rows],
           width=width, label="average acc")
    ax.bar([i + width / 2 for i in x], [r["whole_acc"] for r in rows],
           width=width, label="whole acc")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0.0, 1.02)
    ax.grid(True, axis="y", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
