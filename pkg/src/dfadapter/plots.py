"""Report figures: training curves, ROC, saliency overlay. Rendered off-screen to PNG."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_training_curves(log: list[dict], path) -> None:
    """Loss (left) and train/val accuracy (right) per epoch, with the lr on a twin axis."""
    with plt.rc_context(STYLE):
        epochs = [r["epoch"] for r in log]
        fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(8, 3))
        ax_l.plot(epochs, [r["loss"] for r in log], color="C0")
        ax_l.set_xlabel("epoch")
        ax_l.set_ylabel("mean loss")
        lr_ax = ax_l.twinx()
        lr_ax.plot(epochs, [r["lr"] for r in log], color="0.6", ls="--", lw=1)
        lr_ax.set_ylabel("lr", color="0.4")
        ax_a.plot(epochs, [r["train_acc"] for r in log], label="train")
        val = [r.get("val_acc") for r in log]
        if any(v is not None for v in val):
            ax_a.plot(epochs, [np.nan if v is None else v for v in val], label="val")
        ax_a.set_ylim(0.0, 1.02)
        ax_a.set_xlabel("epoch")
        ax_a.set_ylabel("accuracy")
        ax_a.legend(loc="lower right")
        _save(fig, path)


def plot_roc(roc: list, auc: float, eer: float, path) -> None:
    with plt.rc_context(STYLE):
        fpr, tpr = np.asarray(roc, dtype=float).T
        fig, ax = plt.subplots(figsize=(3.6, 3.4))
        ax.plot(fpr, tpr, drawstyle="default", label=f"AUC {auc:.3f}")
        ax.plot([0, 1], [0, 1], color="0.7", lw=0.8)
        ax.plot([eer], [1 - eer], "o", ms=4, color="C3", label=f"EER {eer:.3f}")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.01)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.legend(loc="lower right")
        _save(fig, path)


def plot_saliency(image: np.ndarray, heatmap: np.ndarray, path, title: str = "") -> None:
    """Input image beside the heatmap overlaid on it. ``image`` is (C, H, W) in [0, 1]."""
    with plt.rc_context(STYLE):
        rgb = np.clip(np.transpose(np.asarray(image), (1, 2, 0)), 0, 1)
        fig, (a0, a1) = plt.subplots(1, 2, figsize=(5.2, 2.8))
        a0.imshow(rgb)
        a0.set_title("input")
        a1.imshow(rgb)
        im = a1.imshow(heatmap, cmap="jet", alpha=0.45, vmin=0, vmax=1)
        a1.set_title(title or "saliency")
        for a in (a0, a1):
            a.set_axis_off()
        fig.colorbar(im, ax=a1, fraction=0.046, pad=0.04)
        _save(fig, path)
