"""Evaluation report figures.

The evaluation command renders one figure per report: each table row's score
drawn with its confidence interval whiskers, aggregate rows highlighted.
Rendering uses the non-interactive backend so it works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def render_score_figure(rows: list[tuple[str, float, float, float]], path: str,
                        metric_label: str, title: str | None = None) -> None:
    """Render scores with CI whiskers to an image file.

    ``rows`` holds (label, score, ci_low, ci_high) tuples, already in display
    order; labels starting with "All" are drawn as aggregates.
    """
    if not rows:
        raise ValueError("no rows to plot")
    labels = [row[0] for row in rows]
    scores = [row[1] for row in rows]
    lower_err = [max(0.0, row[1] - row[2]) for row in rows]
    upper_err = [max(0.0, row[3] - row[1]) for row in rows]
    positions = list(range(len(rows), 0, -1))
    colors = ["#1f5fa8" if not label.startswith("All") else "#c04a0e"
              for label in labels]

    height = max(2.0, 0.45 * len(rows) + 1.2)
    fig, ax = plt.subplots(figsize=(7.5, height))
    ax.errorbar(scores, positions, xerr=[lower_err, upper_err], fmt="none",
                ecolor="#666666", elinewidth=1.2, capsize=3, zorder=2)
    ax.scatter(scores, positions, c=colors, s=36, zorder=3)
    ax.set_yticks(positions)
    ax.set_yticklabels(labels)
    ax.set_xlabel(metric_label)
    if title:
        ax.set_title(title)
    ax.grid(axis="x", linestyle=":", linewidth=0.6, alpha=0.7)
    ax.margins(y=0.08)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
