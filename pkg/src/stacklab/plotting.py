"""PNG figures: image grids, contact sheets and training curves (Agg backend)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import RenderError  # noqa: E402


def to_rgb(img):
    """[3, H, W] in [-1, 1] -> [H, W, 3] in [0, 1]."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 3 or a.shape[0] != 3:
        raise RenderError(f"expected a [3, H, W] image, got {a.shape}")
    return np.clip((a.transpose(1, 2, 0) + 1.0) / 2.0, 0.0, 1.0)


def _save(fig, path):
    try:
        fig.savefig(path, dpi=100)
    finally:
        plt.close(fig)
    return path


def image_grid(rows, path, row_labels=None, col_labels=None, title=None, cell=1.0):
    """Save a grid where ``rows[i][j]`` is a [3, H, W] image (or None)."""
    n_rows = len(rows)
    n_cols = max((len(r) for r in rows), default=0)
    if n_rows == 0 or n_cols == 0:
        raise RenderError("nothing to draw")
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(cell * n_cols + 1.2, cell * n_rows + 0.6),
                             squeeze=False)
    for i in range(n_rows):
        for j in range(n_cols):
            ax = axes[i][j]
            ax.set_xticks([])
            ax.set_yticks([])
            img = rows[i][j] if j < len(rows[i]) else None
            if img is None:
                ax.axis("off")
                continue
            ax.imshow(to_rgb(img), interpolation="nearest")
            if col_labels is not None and i == 0:
                ax.set_title(str(col_labels[j]), fontsize=7)
        if row_labels is not None:
            axes[i][0].set_ylabel(str(row_labels[i]), fontsize=6, rotation=0, ha="right", va="center")
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def contact_sheet(images, path, ncols=8, title=None):
    images = list(images)
    rows = [images[i:i + ncols] for i in range(0, len(images), ncols)]
    return image_grid(rows, path, title=title)


def stage_comparison(stage1, stage2, captions, path):
    """One column per caption: Stage-I sketch above its Stage-II refinement."""
    return image_grid([list(stage1), list(stage2)], path, row_labels=["Stage-I", "Stage-II"],
                      col_labels=[c[:18] for c in captions], cell=1.3)


def retrieval_sheet(queries, neighbours, path, distances=None):
    """Each row: the query image followed by its nearest training images."""
    rows = [[q] + list(nb) for q, nb in zip(queries, neighbours)]
    labels = ["query"] + [f"nn{k + 1}" for k in range(max(len(n) for n in neighbours))]
    return image_grid(rows, path, col_labels=labels)


def training_curves(logs, path, keys=("d_loss", "g_loss", "kl_term")):
    """``logs`` maps a label to a list of per-epoch records."""
    fig, axes = plt.subplots(1, len(keys), figsize=(4 * len(keys), 3), squeeze=False)
    for ax, key in zip(axes[0], keys):
        for label, records in logs.items():
            if records:
                ax.plot([r["epoch"] for r in records], [r[key] for r in records], label=label, lw=1)
        ax.set_xlabel("epoch")
        ax.set_title(key, fontsize=9)
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
    axes[0][0].legend(fontsize=7, frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def ablation_chart(results, path, key="score", title=None):
    """Bar per configuration: mean over seeds with the individual seeds as dots."""
    names = list(results)
    fig, ax = plt.subplots(figsize=(1.3 * len(names) + 1.5, 3))
    for i, name in enumerate(names):
        vals = results[name][key]
        ax.bar(i, np.mean(vals), color="0.75", width=0.6)
        ax.plot([i] * len(vals), vals, "k.", ms=4)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, fontsize=8)
    ax.set_ylabel(key)
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)
