"""Figures written next to the JSON reports (PNG via the Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .profiling import depth_shades  # noqa: E402


def _save(fig, path):
    path = Path(path)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_loss_curve(losses, path, title="training loss"):
    fig, ax = plt.subplots(figsize=(5, 3))
    steps = np.arange(1, len(losses) + 1)
    ax.plot(steps, losses, lw=0.8, color="tab:blue", alpha=0.5, label="per step")
    if len(losses) >= 10:
        width = max(5, len(losses) // 30)
        smooth = np.convolve(losses, np.ones(width) / width, mode="valid")
        ax.plot(steps[width - 1:], smooth, color="tab:blue", label=f"mean of {width}")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_depth_map(dmap, path, volume=None):
    """One panel per patch slice; darker red = pruned later, with the image slice underneath if given."""
    shades = depth_shades(dmap)
    gh, gw, gd = shades.shape
    cols = min(gd, 4)
    rows = -(-gd // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.2 * rows), squeeze=False)
    later = 1.0 - shades.astype(np.float64) / 255.0
    for z in range(rows * cols):
        ax = axes[z // cols][z % cols]
        ax.axis("off")
        if z >= gd:
            continue
        extent = (0, gw, gh, 0)
        if volume is not None:
            vol = np.asarray(volume)
            vol = vol[..., 0] if vol.ndim == 4 else vol
            p = vol.shape[2] // gd
            ax.imshow(vol[:, :, z * p + p // 2], cmap="gray", extent=extent)
        ax.imshow(later[:, :, z], cmap="Reds", vmin=0.0, vmax=1.0, alpha=0.6, extent=extent)
        ax.set_title(f"patch slice {z}", fontsize=8)
    return _save(fig, path)


def plot_mac_comparison(ratios, reports, path):
    fig, ax = plt.subplots(figsize=(5, 3))
    x = np.arange(len(ratios))
    enc = np.array([rep.encoder_total for rep in reports]) / 1e9
    rest = np.array([rep.completion_total + rep.decoder_total for rep in reports]) / 1e9
    ax.bar(x, enc, label="encoder")
    ax.bar(x, rest, bottom=enc, label="completion + decoder")
    ax.set_xticks(x, [f"r={r:g}" for r in ratios])
    ax.set_ylabel("GMACs per image")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_prediction(volume, labels, prediction, path):
    """Middle axial slice: input, ground truth, prediction."""
    vol = np.asarray(volume)
    vol = vol[..., 0] if vol.ndim == 4 else vol
    z = vol.shape[2] // 2
    fig, axes = plt.subplots(1, 3 if labels is not None else 2, figsize=(7.5, 2.6))
    axes[0].imshow(vol[:, :, z], cmap="gray")
    axes[0].set_title("input")
    if labels is not None:
        axes[1].imshow(np.asarray(labels)[:, :, z], cmap="viridis", interpolation="nearest")
        axes[1].set_title("labels")
    axes[-1].imshow(np.asarray(prediction)[:, :, z], cmap="viridis", interpolation="nearest")
    axes[-1].set_title("prediction")
    for ax in axes:
        ax.axis("off")
    return _save(fig, path)
