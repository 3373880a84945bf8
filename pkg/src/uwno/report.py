"""Figures and overlay images written next to the run logs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

OVERLAY_COLOR = (1.0, 0.0, 0.0)


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training_curves(history: list[dict], path) -> Path:
    """Loss and Dice per epoch, side by side."""
    epochs = [r["epoch"] for r in history]
    fig, (ax_loss, ax_dice) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, [r["train_loss"] for r in history], color="tab:blue")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("soft Dice loss")
    ax_loss.set_ylim(bottom=0)

    ax_dice.plot(epochs, [r["train_dice"] for r in history], label="train")
    val = [(r["epoch"], r["val_dice"]) for r in history if r.get("val_dice") is not None]
    if val:
        ax_dice.plot(*zip(*val), label="validation")
    ax_dice.set_xlabel("epoch")
    ax_dice.set_ylabel("Dice score")
    ax_dice.set_ylim(0, 1)
    ax_dice.legend(loc="lower right", frameon=False)
    for ax in (ax_loss, ax_dice):
        ax.spines[["top", "right"]].set_visible(False)
    return _finish(fig, path)


def plot_dice_histogram(scores, path, bins: int = 20) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.hist(scores, bins=bins, range=(0, 1), color="0.4", edgecolor="white")
    ax.axvline(float(np.mean(scores)), color="tab:red", lw=1, label=f"mean {np.mean(scores):.3f}")
    ax.set_xlabel("Dice score")
    ax.set_ylabel("images")
    ax.legend(frameon=False)
    ax.spines[["top", "right"]].set_visible(False)
    return _finish(fig, path)


def overlay(image: np.ndarray, mask: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """RGB uint8 image with the mask foreground blended in at ``alpha`` opacity."""
    gray = np.clip(image, 0.0, 1.0)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    fg = mask.astype(bool)
    rgb[fg] = (1 - alpha) * rgb[fg] + alpha * np.array(OVERLAY_COLOR)
    return np.round(rgb * 255).astype(np.uint8)
