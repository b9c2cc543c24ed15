"""Report figures.  Uses the non-interactive Agg backend; every function writes one file."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_STYLE = {
    "l_whole": ("whole CE", "C0"),
    "l_local": ("local CE", "C1"),
    "l_disc": ("discrimination", "C2"),
    "l_fuse": ("fusion CE", "C3"),
    "total": ("weighted total", "k"),
}


def _finish(fig, ax, path) -> Path:
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_losses(rows, path) -> Path:
    """Per-epoch loss components; ``rows`` are EpochLog objects or dicts."""
    rows = [r if isinstance(r, dict) else r.as_row() for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.6))
    epochs = [int(r["epoch"]) for r in rows]
    for key, (label, color) in LOSS_STYLE.items():
        ax.plot(epochs, [float(r[key]) for r in rows], label=label, color=color,
                lw=1.8 if key == "total" else 1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(frameon=False, fontsize=8)
    return _finish(fig, ax, path)


def plot_sweep(rows, seeds: Sequence[int], path) -> Path:
    """Mean accuracy against k, with the individual seeds as faint markers."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    ks = [r.k for r in rows]
    for i, s in enumerate(seeds):
        ax.plot(ks, [r.accuracy[i] for r in rows], "o", ms=3, alpha=0.4, color="C0",
                label="per seed" if i == 0 else None)
    ax.plot(ks, [r.mean for r in rows], "-o", color="C3", label="mean")
    ax.set_xscale("log")
    ax.set_xticks(ks)
    ax.set_xticklabels([str(k) for k in ks])
    ax.set_xlabel("labelled images per class (k)")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend(frameon=False, fontsize=8)
    return _finish(fig, ax, path)


def plot_soundness(report, path) -> Path:
    """Per-seed accuracy of both configurations next to mask and disk IoU."""
    fig, (ax, bx) = plt.subplots(1, 2, figsize=(8, 3.4))
    x = np.arange(len(report.seeds))
    ax.bar(x - 0.2, report.baseline_accuracy, 0.4, label="whole branch only", color="C7")
    ax.bar(x + 0.2, report.scdr_accuracy, 0.4, label="two-branch", color="C0")
    ax.set_xticks(x)
    ax.set_xticklabels([f"seed {s}" for s in report.seeds])
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend(frameon=False, fontsize=8)
    bx.bar(x - 0.2, report.disk_iou, 0.4, label="centred disk", color="C7")
    bx.bar(x + 0.2, report.mask_iou, 0.4, label="captured mask", color="C2")
    bx.set_xticks(x)
    bx.set_xticklabels([f"seed {s}" for s in report.seeds])
    bx.set_ylabel("IoU with glyph")
    bx.legend(frameon=False, fontsize=8)
    bx.spines["right"].set_visible(False)
    bx.spines["top"].set_visible(False)
    return _finish(fig, ax, path)


def plot_heatmap_grid(images, columns: dict[str, list], path) -> Path:
    """Input image in the first column, then one heatmap column per model."""
    n = len(images)
    names = list(columns)
    fig, axes = plt.subplots(n, 1 + len(names), figsize=(1.6 * (1 + len(names)), 1.6 * n), squeeze=False)
    for i in range(n):
        axes[i, 0].imshow(images[i], cmap="gray", vmin=0, vmax=1)
        for j, name in enumerate(names):
            axes[i, j + 1].imshow(images[i], cmap="gray", vmin=0, vmax=1)
            axes[i, j + 1].imshow(columns[name][i], cmap="jet", alpha=0.45, vmin=0, vmax=1)
        for a in axes[i]:
            a.set_axis_off()
    axes[0, 0].set_title("input", fontsize=8)
    for j, name in enumerate(names):
        axes[0, j + 1].set_title(name, fontsize=8)
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
