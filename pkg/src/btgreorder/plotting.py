"""Figures for the CLI report paths.  Always renders to files (Agg backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_learning_curve(history: list[dict], path, title: str | None = None) -> None:
    """Train/dev loss and dev exact match per epoch."""
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.4))
    for split, style in (("train", "-o"), ("dev", "--s")):
        recs = [r for r in history if r["split"] == split]
        if recs:
            ax_loss.plot([r["epoch"] for r in recs], [r["loss"] for r in recs], style, ms=3, label=split)
    dev = [r for r in history if r["split"] == "dev" and r.get("exact_match") is not None]
    if dev:
        ax_acc.plot([r["epoch"] for r in dev], [r["exact_match"] for r in dev], "-s", ms=3, color="C1")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean token cross-entropy")
    ax_loss.legend(frameon=False)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("dev exact match")
    ax_acc.set_ylim(-0.02, 1.02)
    for ax in (ax_loss, ax_acc):
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_matrix(matrix: np.ndarray, path, title: str | None = None) -> None:
    """Heatmap of a (soft) permutation matrix; rows are output slots, columns input positions."""
    matrix = np.asarray(matrix, dtype=float)
    n = matrix.shape[0]
    side = min(1.2 + 0.35 * n, 10)
    fig, ax = plt.subplots(figsize=(side + 1.0, side))
    im = ax.imshow(matrix, vmin=0.0, vmax=1.0, cmap="viridis")
    if n <= 20:
        ax.set_xticks(range(n))
        ax.set_yticks(range(n))
    ax.set_xlabel("input position")
    ax.set_ylabel("output slot")
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
