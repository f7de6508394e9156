"""Image grids and matplotlib figures written next to the metric files."""

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 3.6),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.4,
    "svg.hashsalt": "glowflow",
}
PERM_COLORS = {"reverse": "#1f77b4", "shuffle": "#2ca02c", "invconv": "#d62728"}


def to_uint8(images, n_bits=8):
    """Floats in [0, 1) -> 8-bit pixels, through the model's bit depth."""
    n_bits = 8 if n_bits is None else n_bits
    q = np.clip(np.floor(np.asarray(images, dtype=np.float64) * 2 ** n_bits), 0, 2 ** n_bits - 1)
    return (q * (255.0 / (2 ** n_bits - 1))).round().astype(np.uint8)


def image_grid(images, n_bits=8, ncols=None, gap=2):
    """Tile (n, h, w, c) images row-major with ``gap`` px of black between."""
    pix = to_uint8(images, n_bits)
    n, h, w, c = pix.shape
    ncols = ncols or int(np.ceil(np.sqrt(n)))
    nrows = int(np.ceil(n / ncols))
    grid = np.zeros((nrows * h + (nrows - 1) * gap, ncols * w + (ncols - 1) * gap, c), np.uint8)
    for k in range(n):
        r, col = divmod(k, ncols)
        grid[r * (h + gap):r * (h + gap) + h, col * (w + gap):col * (w + gap) + w] = pix[k]
    return grid


def save_png(path, pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim == 3 and pixels.shape[-1] == 1:
        pixels = pixels[..., 0]
    Image.fromarray(pixels).save(path, format="PNG", optimize=False)


def read_metrics(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_training_curve(metrics, path, title=None):
    """bits/dim against step for one run."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot([m["step"] for m in metrics], [m["bpd"] for m in metrics], color="k")
        ax.set_xlabel("step")
        ax.set_ylabel("bits / dim")
        if title:
            ax.set_title(title)
        _save(fig, path)


def plot_ablation(runs, path):
    """Two panels (additive, affine); one mean +- std band per permutation.

    ``runs`` maps (perm, coupling) to a list of per-seed metric lists that
    share the same logging steps.
    """
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, sharey=True, figsize=(8.0, 3.4))
        for ax, coupling in zip(axes, ("additive", "affine")):
            for perm in ("reverse", "shuffle", "invconv"):
                seeds = runs.get((perm, coupling))
                if not seeds:
                    continue
                steps = np.array([m["step"] for m in seeds[0]])
                bpd = np.array([[m["bpd"] for m in run] for run in seeds])
                mu, sd = bpd.mean(axis=0), bpd.std(axis=0)
                ax.plot(steps, mu, color=PERM_COLORS[perm], label=perm)
                ax.fill_between(steps, mu - sd, mu + sd, color=PERM_COLORS[perm], alpha=0.2, lw=0)
            ax.set_title(f"{coupling} coupling")
            ax.set_xlabel("step")
        axes[0].set_ylabel("bits / dim")
        axes[1].legend()
        _save(fig, path)


def plot_points_2d(samples, path, reference=None, title=None):
    """Scatter of 2-D samples, optionally over reference data."""
    samples = np.asarray(samples).reshape(-1, 2)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 4.0))
        if reference is not None:
            ref = np.asarray(reference).reshape(-1, 2)
            ax.scatter(ref[:, 1], ref[:, 0], s=2, color="0.7", label="data", rasterized=True)
        ax.scatter(samples[:, 1], samples[:, 0], s=2, color="#d62728", label="samples",
                   rasterized=True)
        ax.set_xlabel("channel 1")
        ax.set_ylabel("channel 0")
        if title:
            ax.set_title(title)
        if reference is not None:
            ax.legend(loc="upper center", markerscale=4)
        _save(fig, path)
