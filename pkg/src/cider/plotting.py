"""Figures rendered next to the CSV reports.

PNG metadata is pinned so a rerun from the same CSV produces identical bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

_METADATA = {"Software": None}
_STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_METADATA)
    plt.close(fig)
    return path


def plot_loss_curve(rows: Sequence[Mapping[str, float]], path,
                    terms: Sequence[str] = ("l1", "kld", "recon", "task", "total")) -> Path:
    """One line per loss term against epoch, log-scaled when every value is positive."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        epochs = [int(r["epoch"]) for r in rows]
        positive = True
        for term in terms:
            values = [float(r[term]) for r in rows]
            positive &= all(v > 0 for v in values)
            ax.plot(epochs, values, marker="o", markersize=2.5, linewidth=1.2, label=term)
        if rows and positive:
            ax.set_yscale("log")
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean loss per step")
        if rows:
            ax.legend(ncol=len(terms), loc="upper center", bbox_to_anchor=(0.5, 1.15))
        return _save(fig, path)


def plot_sparsity_curve(rows: Sequence[Mapping[str, float]], path,
                        baseline: Sequence[Mapping[str, float]] | None = None) -> Path:
    """Subgraph accuracy and label agreement against retained-edge fraction."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        xs = [float(r["sparsity"]) for r in rows]
        ax.plot(xs, [float(r["accuracy"]) for r in rows], marker="o", label="accuracy")
        ax.plot(xs, [float(r["agreement"]) for r in rows], marker="s", linestyle="--",
                label="label agreement")
        if baseline:
            ax.plot([float(r["sparsity"]) for r in baseline],
                    [float(r["accuracy"]) for r in baseline],
                    marker="^", color="0.5", label="random top-k")
        ax.set_xlabel("fraction of edges kept")
        ax.set_ylabel("rate")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(loc="lower right")
        return _save(fig, path)
