"""Report graphics: side-by-side sample panels and metric plots."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .classes import render_labels_rgb  # noqa: E402

TILE = 224
MISSING_GRAY = 128
# fixed metadata keeps re-rendered PNGs byte-identical
_PNG_META = {"Software": None}


def _tile(rgb):
    return np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)


def make_panel(input_lr, truth, predictions, tile=TILE):
    """Input, ground truth, then one column per model (gray where a row failed)."""
    factor = tile // input_lr.shape[-1]
    up = np.repeat(np.repeat(np.asarray(input_lr, dtype=np.float64), factor, 0), factor, 1)
    columns = [_tile(np.repeat(up[..., None], 3, axis=-1)), _tile(render_labels_rgb(truth))]
    for pred in predictions:
        if pred is None:
            columns.append(np.full((tile, tile, 3), MISSING_GRAY, dtype=np.uint8))
        else:
            columns.append(_tile(render_labels_rgb(pred)))
    return np.concatenate(columns, axis=1)


def save_png(array, path):
    Image.fromarray(array).save(path, format="PNG", optimize=False)
    return Path(path)


def plot_metrics(results, path):
    """Dice and mIOU per row, with the reported values as hollow markers."""
    fig, axes = plt.subplots(1, 2, figsize=(12, 5), sharey=True)
    x = np.arange(len(results))
    for ax, key, ref in ((axes[0], "dice", "paper_dice"), (axes[1], "miou", "paper_miou")):
        vals = [getattr(r, key) if getattr(r, key) is not None else np.nan for r in results]
        refs = [getattr(r, ref) if getattr(r, ref) is not None else np.nan for r in results]
        colors = ["tab:blue" if r.table == 1 else "tab:orange" for r in results]
        ax.bar(x, vals, color=colors)
        ax.plot(x, refs, "ko", mfc="none", label="reported")
        ax.set_xticks(x)
        ax.set_xticklabels([r.row_id for r in results], rotation=90, fontsize=7)
        ax.set_title(key)
        ax.set_ylim(0, 1)
    axes[0].set_ylabel("score on phantom test split")
    axes[1].legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return Path(path)


def plot_curves(results, path):
    """Test Dice after each epoch for every row that trained."""
    fig, ax = plt.subplots(figsize=(7, 5))
    for r in results:
        if r.curve:
            ax.plot([c["epoch"] for c in r.curve], [c["dice"] for c in r.curve],
                    marker=".", label=r.row_id, ls="-" if r.use_dice else "--")
    ax.set_xlabel("epoch")
    ax.set_ylabel("test dice")
    ax.set_ylim(0, 1)
    if ax.lines:
        ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return Path(path)
