"""Matplotlib renderings of the delimited reports the CLI emits.

Every plotting helper takes already-computed rows and writes one PNG next
to the CSV/JSON it illustrates. Figures are conveniences; the delimited
files stay the authoritative outputs.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import BucketRow
from .scanner import ScanReport
from .training import EpochStats


def save_error_vs_distance_plot(buckets: list[BucketRow], path: Path | str,
                                title: str = "Focus error vs distance from plane") -> None:
    centers = [0.5 * (b.lo_um + b.hi_um) for b in buckets]
    means = [b.fe_mean_um for b in buckets]
    stds = [b.fe_std_um for b in buckets]
    counts = [b.count for b in buckets]
    fig, (ax, ax2) = plt.subplots(
        2, 1, figsize=(6.4, 4.8), sharex=True,
        gridspec_kw={"height_ratios": [3, 1]},
    )
    ax.errorbar(centers, means, yerr=stds, fmt="o-", capsize=3, color="tab:blue")
    ax.set_ylabel("focus error [um]")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax2.bar(centers, counts, width=0.8 * (buckets[0].hi_um - buckets[0].lo_um) if buckets else 1.0,
            color="tab:gray")
    ax2.set_xlabel("|distance from optimal plane| [um]")
    ax2.set_ylabel("n")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_history_plot(history: list[EpochStats], path: Path | str) -> None:
    epochs = [h.epoch for h in history]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.plot(epochs, [h.train_loss for h in history], "o-", label="train loss", color="tab:blue")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss", color="tab:blue")
    ax.grid(alpha=0.3)
    twin = ax.twinx()
    twin.plot(epochs, [h.val_fe_um for h in history], "s-", label="val FE", color="tab:orange")
    twin.set_ylabel("validation FE [um]", color="tab:orange")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_ablation_plot(rows: list[dict], path: Path | str) -> None:
    """Bar chart of held-out FE per variant; rows come from the ablation CSV."""
    variants = [r["variant"] for r in rows]
    fe = [float(r["fe_mean_um"]) for r in rows]
    std = [float(r["fe_std_um"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5.4, 4.0))
    ax.bar(variants, fe, yerr=std, capsize=4, color=["tab:blue", "tab:green", "tab:orange"])
    ax.set_ylabel("held-out FE [um]")
    ax.set_title("Encoder ablation")
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_scan_map(report: ScanReport, path: Path | str) -> None:
    """Grid map of a scan: skipped, out-of-DoF, in-DoF, and failed cells."""
    nx, ny = report.grid
    grid = np.full((ny, nx), 0.0)
    for t in report.tiles:
        row = ny - 1 - t.grid_y
        if t.skipped_empty:
            value = 0.0
        elif t.failed:
            value = 1.0
        elif t.in_dof:
            value = 3.0
        else:
            value = 2.0
        grid[row, t.grid_x] = value
    fig, ax = plt.subplots(figsize=(5.0, 5.0 * ny / max(nx, 1)))
    cmap = matplotlib.colors.ListedColormap(["#dddddd", "#202020", "#d95f02", "#1b9e77"])
    ax.imshow(grid, cmap=cmap, vmin=-0.5, vmax=3.5)
    for t in report.tiles:
        ax.text(t.grid_x, ny - 1 - t.grid_y, str(t.order), ha="center", va="center", fontsize=8)
    ax.set_xticks(range(nx))
    ax.set_yticks(range(ny))
    ax.set_title(f"{report.slide_id}: {report.summary_line()}", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
