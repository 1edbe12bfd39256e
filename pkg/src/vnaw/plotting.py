"""Report figures written next to the CSV outputs. Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import class_names  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training_curves(history, path) -> Path:
    """Loss and macro-F1 per epoch."""
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_f1) = plt.subplots(1, 2, figsize=(8, 3))
        epochs = [h.epoch for h in history]
        ax_loss.plot(epochs, [h.loss for h in history], marker="o", ms=3)
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("training loss")
        ax_loss.set_yscale("log")
        ax_f1.plot(epochs, [h.train_f1 for h in history], marker="o", ms=3, label="train")
        ax_f1.plot(epochs, [h.val_f1 for h in history], marker="s", ms=3, label="val")
        ax_f1.set_xlabel("epoch")
        ax_f1.set_ylabel("macro-F1")
        ax_f1.set_ylim(0, 1)
        ax_f1.legend(frameon=False)
        return _save(fig, path)


def plot_ablation(table, path) -> Path:
    """Grouped bars: per-class and average F1 for each ablation variant."""
    k = table.class_f1.shape[1]
    labels = class_names(k) + ["Avg."]
    scores = np.column_stack([table.class_f1, table.macro])
    x = np.arange(len(labels))
    width = 0.8 / len(table.names)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(labels)), 3.2))
        for i, name in enumerate(table.names):
            ax.bar(x + (i - (len(table.names) - 1) / 2) * width, scores[i], width, label=name)
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=30, ha="right")
        ax.set_ylabel("F1")
        ax.set_ylim(0, 1)
        ax.legend(frameon=False, ncol=len(table.names), fontsize=8)
        return _save(fig, path)


def plot_clip(values: np.ndarray, path, indices=None, max_frames: int = 16) -> Path:
    """Frames of a clip in a row-major grid (first channel only)."""
    values = np.asarray(values)[:max_frames]
    n = len(values)
    cols = min(n, 8)
    rows = -(-n // cols)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, cols, figsize=(1.2 * cols, 1.3 * rows), squeeze=False)
        for ax in axes.flat:
            ax.axis("off")
        for j in range(n):
            ax = axes.flat[j]
            ax.imshow(values[j, 0], cmap="gray", vmin=0, vmax=1, interpolation="nearest")
            if indices is not None:
                ax.set_title(str(int(indices[j])), fontsize=7)
        return _save(fig, path)
