"""Static figures for the experiment outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..gridworld import GridSpec  # noqa: E402
from ..metrics import traversal_distance_matrix  # noqa: E402


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_distance_matrices(grid: GridSpec, step_sizes, path) -> Path:
    """Ground-truth (top) and perceived (bottom) traversal matrices for each step size."""
    step_sizes = list(step_sizes)
    k, size = grid.grid_cells_per_axis, grid.square_size_px
    side = max(grid.image_side_px, (k - 1) * max(step_sizes) + size)
    fig, axes = plt.subplots(2, len(step_sizes), figsize=(1.6 * len(step_sizes), 3.4), squeeze=False)
    for col, s in enumerate(step_sizes):
        spec = GridSpec(1, size, s, k, side)
        for row, kind in enumerate(("ground_truth", "perceived")):
            m = traversal_distance_matrix(spec, 0, kind).values
            ax = axes[row, col]
            ax.imshow(m, cmap="viridis")
            ax.set_xticks([])
            ax.set_yticks([])
        axes[0, col].set_title(f"{s}px", fontsize=8)
    axes[0, 0].set_ylabel("ground truth", fontsize=8)
    axes[1, 0].set_ylabel("perceived", fontsize=8)
    return _save(fig, path)


def plot_overlap_sweep(records, models, slopes, path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3))
    styles = ["--", "-", ":", "-."]
    for i, kind in enumerate(models):
        pts = [(r.step_px, r.metrics.get("mig")) for r in records if r.model_kind == kind and r.status == "ok"]
        pts = [(x, y) for x, y in pts if y is not None]
        if not pts:
            continue
        x, y = map(np.asarray, zip(*pts))
        ax.scatter(x, y, s=10, alpha=0.6)
        if len(set(x)) >= 2:
            coef = np.polyfit(x, y, 1)
            xs = np.linspace(x.min(), x.max(), 20)
            ax.plot(xs, np.polyval(coef, xs), styles[i % len(styles)], label=f"{kind} (slope {slopes[kind]:.3f})")
    ax.set_xlabel("step size (px)")
    ax.set_ylabel("MIG")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_model_comparison(summary, path) -> Path:
    rows = [r for r in summary if r[3] == "rank_correlation"]
    fig, ax = plt.subplots(figsize=(5, 3))
    labels = [r[0] for r in rows]
    means = [r[4] if r[4] is not None else np.nan for r in rows]
    errs = [r[6] if r[6] is not None else 0.0 for r in rows]
    bars = ax.bar(range(len(rows)), means, yerr=errs, capsize=3)
    for bar, r in zip(bars, rows):
        if r[2] == "ground_truth":
            bar.set_hatch("//")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("rank correlation")
    return _save(fig, path)


def plot_rl_curves(records, encoders, path, smooth: int = 10) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    for name in encoders:
        curves = [r.metrics["returns"] for r in records if r.label == name and r.status == "ok"]
        if not curves:
            continue
        arr = np.asarray(curves, dtype=np.float64)
        if smooth > 1 and arr.shape[1] >= smooth:
            kernel = np.ones(smooth) / smooth
            arr = np.stack([np.convolve(c, kernel, mode="valid") for c in arr])
        mean, std = arr.mean(0), arr.std(0)
        x = np.arange(len(mean))
        ax.plot(x, mean, label=name)
        ax.fill_between(x, mean - std, mean + std, alpha=0.2)
    ax.set_xlabel("episode")
    ax.set_ylabel("return")
    ax.legend(fontsize=7)
    return _save(fig, path)
