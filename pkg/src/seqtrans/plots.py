"""Figures written next to the CSV/JSON outputs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_history(history: list[dict], path) -> None:
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(8.0, 3.2))
        epochs = [r["epoch"] for r in history]
        ax_loss.plot(epochs, [r["train_loss"] for r in history], marker="o", ms=3)
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("training loss")
        ax_val.plot(epochs, [r["val_hit5"] for r in history], marker="o", ms=3, label="Hit@5")
        ax_val.plot(epochs, [r["val_ndcg5"] for r in history], marker="s", ms=3, label="NDCG@5")
        ax_val.set_xlabel("epoch")
        ax_val.set_ylabel("validation")
        ax_val.legend()
        for ax in (ax_loss, ax_val):
            ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        _save(fig, path)


def plot_cutoffs(metrics: dict, path, title: str = "") -> None:
    cutoffs = [int(n) for n in metrics["hit"]]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(cutoffs, [metrics["hit"][str(n)] for n in cutoffs], marker="o", label="Hit@n")
        ax.plot(cutoffs, [metrics["ndcg"][str(n)] for n in cutoffs], marker="s", label="NDCG@n")
        ax.set_xticks(cutoffs)
        ax.set_xlabel("cutoff n")
        ax.set_ylim(0, 1)
        if title:
            ax.set_title(title)
        ax.legend()
        _save(fig, path)


def plot_sweep(rows: list[dict], param: str, path) -> None:
    """Hit@5 and NDCG@5 against the swept value, one panel each."""
    xs = [r["value"] for r in rows]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7.0, 3.0))
        for ax, key, label in zip(axes, ("hit5", "ndcg5"), ("Hit@5", "NDCG@5")):
            ax.plot(xs, [r[key] for r in rows], marker="o")
            ax.set_xticks(xs)
            ax.set_xlabel("λ" if param == "lambda" else param)
            ax.set_ylabel(label)
        _save(fig, path)
