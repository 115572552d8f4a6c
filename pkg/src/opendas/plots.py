"""Report figures rendered to PNG with the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training_curves(entries: Sequence, path) -> Path:
    """Loss terms and learning rate against the global step, one color per stage."""
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_lr) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
        stages = sorted({e.stage for e in entries})
        offset = 0
        for stage in stages:
            rows = [e for e in entries if e.stage == stage]
            x = np.arange(len(rows)) + offset
            ax_loss.plot(x, [e.loss_ce for e in rows], label=f"stage {stage} CE")
            if any(e.loss_triplet for e in rows):
                ax_loss.plot(x, [e.loss_triplet for e in rows], "--",
                             label=f"stage {stage} triplet")
            ax_lr.plot(x, [e.lr for e in rows], label=f"stage {stage}")
            offset += len(rows)
        ax_loss.set_ylabel("loss")
        ax_loss.legend(frameon=False)
        ax_lr.set_ylabel("learning rate")
        ax_lr.set_xlabel("step")
        return _save(fig, path)


def plot_confusion(predictions: Sequence[str], truths: Sequence[str],
                   classes: Sequence[str], path) -> Path:
    """Row-normalized confusion matrix over ``classes``."""
    index = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)))
    for p, t in zip(predictions, truths):
        counts[index[t], index[p]] += 1
    rows = counts.sum(axis=1, keepdims=True)
    norm = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    with plt.rc_context(STYLE):
        size = max(3.0, 0.45 * len(classes) + 1.5)
        fig, ax = plt.subplots(figsize=(size, size))
        im = ax.imshow(norm, vmin=0, vmax=1, cmap="Blues")
        ax.set_xticks(range(len(classes)), classes, rotation=60, ha="right")
        ax.set_yticks(range(len(classes)), classes)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        fig.colorbar(im, ax=ax, fraction=0.046)
        return _save(fig, path)


def plot_per_class_f1(per_class: dict, novel: Sequence[str], path) -> Path:
    """Horizontal F1 bars, novel classes in a second color."""
    names = list(per_class)
    f1 = [per_class[n]["f1"] if isinstance(per_class[n], dict) else per_class[n].f1
          for n in names]
    colors = ["tab:orange" if n in set(novel) else "tab:blue" for n in names]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, max(2.0, 0.3 * len(names) + 1)))
        ax.barh(range(len(names)), f1, color=colors)
        ax.set_yticks(range(len(names)), names)
        ax.set_xlim(0, 1)
        ax.invert_yaxis()
        ax.set_xlabel("F1 (orange: novel)")
        return _save(fig, path)
