"""Render report figures to image files with a non-interactive backend."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

FIGSIZE = (6.0, 4.0)
DPI = 120


def setup_figure():
    fig, ax = plt.subplots(figsize=FIGSIZE, dpi=DPI, constrained_layout=True)
    ax.grid(True, alpha=0.3)
    return fig, ax


def save_figure(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps the file bytes stable across runs
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_accuracy_vs_window(curves: dict, path, title: str = "") -> Path:
    """``curves`` maps a label to ``(windows, voted accuracies)``."""
    fig, ax = setup_figure()
    for label, (windows, acc) in sorted(curves.items()):
        ax.plot(windows, [100 * a for a in acc], marker="o", label=label)
    ax.set_xlabel("voting window (frames)")
    ax.set_ylabel("voted accuracy (%)")
    if title:
        ax.set_title(title)
    if curves:
        ax.legend(fontsize="small")
    return save_figure(fig, path)


def plot_convergence(rows: list[dict], epochs, path, metric: str = "voted", title: str = "") -> Path:
    """One line per transfusion depth across the epoch checkpoints."""
    fig, ax = setup_figure()
    for row in rows:
        ax.plot(epochs, [100 * row[f"{metric}@{e}"] for e in epochs], marker="o", label=row["label"])
    ax.set_xlabel("adaptation epochs")
    ax.set_ylabel(f"{metric.replace('_', '-')} accuracy (%)")
    if title:
        ax.set_title(title)
    if rows:
        ax.legend(fontsize="small", ncol=2)
    return save_figure(fig, path)


def plot_improvements(deltas: dict, path, title: str = "") -> Path:
    """Horizontal bars of accuracy gains in percentage points."""
    fig, ax = setup_figure()
    labels = list(deltas)
    ax.barh(range(len(labels)), [deltas[k] for k in labels])
    ax.set_yticks(range(len(labels)), labels, fontsize="x-small")
    ax.axvline(0.0, color="black", linewidth=0.8)
    ax.set_xlabel("improvement (points)")
    if title:
        ax.set_title(title)
    return save_figure(fig, path)
