"""Matplotlib figures written next to the CSV reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_nzr_levels(baseline, recovered, path, title: str = "") -> None:
    """Mean NZR per pyramid level, with and without recovery."""
    levels = np.arange(1, len(baseline) + 1)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(levels, baseline, "o-", label="w/o recovery")
    ax.plot(levels, recovered, "s-", label="w. recovery")
    ax.set_xticks(levels)
    ax.set_xlabel("pyramid level")
    ax.set_ylabel("NZR")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training(steps, losses, path, eval_steps=None, eval_epe=None) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, losses, lw=0.8, label="train loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    if eval_steps:
        ax2 = ax.twinx()
        ax2.plot(eval_steps, eval_epe, "o-", color="C1", label="val EPE")
        ax2.set_ylabel("val EPE (px)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ablation(seeds, epe_on, epe_off, path) -> None:
    x = np.arange(len(seeds))
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(x - 0.2, epe_on, 0.4, label="recovery on")
    ax.bar(x + 0.2, epe_off, 0.4, label="recovery off")
    ax.set_xticks(x)
    ax.set_xticklabels([str(s) for s in seeds])
    ax.set_xlabel("seed")
    ax.set_ylabel("held-out EPE (px)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_image_panel(images: dict[str, np.ndarray], path) -> None:
    """Side-by-side uint8 RGB images with titles."""
    fig, axes = plt.subplots(1, len(images), figsize=(3 * len(images), 3))
    axes = np.atleast_1d(axes)
    for ax, (name, img) in zip(axes, images.items()):
        ax.imshow(img)
        ax.set_title(name)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
