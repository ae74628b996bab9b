"""Figure rendering and delimited outputs for the CLI report paths.

Every command that emits a CSV also renders a matching PNG next to it so a
run directory is inspectable at a glance.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import REGION_NAMES, DiceReport
from .volume import Volume, slice2d

REGION_COLORS = {"et": "tab:blue", "nc": "tab:red", "wt": "tab:green"}


def write_loss_curve_csv(curve: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "lr"])
        for row in curve:
            writer.writerow([row["epoch"], f"{row['mean_loss']:.6f}", f"{row['lr']:.6e}"])


def save_loss_curve_figure(curve: list[dict], path) -> None:
    epochs = [row["epoch"] for row in curve]
    losses = [row["mean_loss"] for row in curve]
    lrs = [row["lr"] for row in curve]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, losses, color="tab:blue", label="mean loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax2 = ax.twinx()
    ax2.plot(epochs, lrs, color="tab:orange", alpha=0.6, label="lr")
    ax2.set_ylabel("learning rate")
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_dice_figure(report: DiceReport, path) -> None:
    x = np.arange(len(report.case_ids))
    width = 0.27
    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(x) + 2), 4))
    for i, region in enumerate(REGION_NAMES):
        ax.bar(x + (i - 1) * width, report.scores[region], width,
               label=region.upper(), color=REGION_COLORS[region])
    ax.set_xticks(x)
    ax.set_xticklabels(report.case_ids, rotation=45, ha="right", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("DSC")
    ax.legend()
    summary = ", ".join(
        f"{r.upper()} {report.mean(r):.3f}({report.std(r):.3f})" for r in REGION_NAMES
    )
    ax.set_title(summary, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_compare_csv(rows: list[dict], path) -> None:
    """rows: {"model": name, "et": (mean, std), "nc": ..., "wt": ...}."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "dsc_et", "dsc_nc", "dsc_wt"])
        for row in rows:
            writer.writerow(
                [row["model"]]
                + [f"{row[r][0]:.3f}({row[r][1]:.3f})" for r in REGION_NAMES]
            )


def save_compare_figure(rows: list[dict], path) -> None:
    x = np.arange(len(rows))
    width = 0.27
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(rows) + 2), 4))
    for i, region in enumerate(REGION_NAMES):
        means = [row[region][0] for row in rows]
        stds = [row[region][1] for row in rows]
        ax.bar(x + (i - 1) * width, means, width, yerr=stds, capsize=3,
               label=region.upper(), color=REGION_COLORS[region])
    ax.set_xticks(x)
    ax.set_xticklabels([row["model"] for row in rows], rotation=20, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("DSC mean(std)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _window(plane: np.ndarray) -> np.ndarray:
    lo, hi = float(plane.min()), float(plane.max())
    if hi <= lo:
        return np.full(plane.shape, 0.5)
    return (plane - lo) / (hi - lo)


def save_case_montage(flair: Volume, t1gd: Volume, labels, path, axis: str = "z") -> None:
    """Central slice of both modalities and the label map."""
    index = flair.spatial_shape["zyx".index(axis)] // 2
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.6))
    for ax, vol, title in zip(axes[:2], (flair, t1gd), ("FLAIR", "T1Gd")):
        ax.imshow(_window(slice2d(vol, axis, index)), cmap="gray", vmin=0, vmax=1)
        ax.set_title(title)
        ax.axis("off")
    lab = _label_plane(labels, axis, index)
    axes[2].imshow(lab, cmap="viridis", vmin=0, vmax=3, interpolation="nearest")
    axes[2].set_title("labels (0..3)")
    axes[2].axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _label_plane(labels, axis: str, index: int) -> np.ndarray:
    data = labels.data
    if axis == "z":
        return data[index]
    if axis == "y":
        return data[:, index]
    return data[:, :, index]


def save_activation_gallery(tiles: list[tuple[str, np.ndarray]], path, cols: int = 4) -> None:
    """Grid of named 2D activation slices, each min-max windowed."""
    n = len(tiles)
    cols = min(cols, max(1, n))
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.6 * cols, 2.8 * rows), squeeze=False)
    for i in range(rows * cols):
        ax = axes[i // cols][i % cols]
        ax.axis("off")
        if i < n:
            name, plane = tiles[i]
            ax.imshow(_window(plane), cmap="magma", vmin=0, vmax=1)
            ax.set_title(name, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
