"""Figure output for evaluation, refinement and ablation reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import EvalReport  # noqa: E402

FORMATS = ("png", "svg")


def _save(fig, stem: Path, formats: Sequence[str]) -> list[Path]:
    stem.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    for fmt in formats:
        p = stem.with_suffix(f".{fmt}")
        fig.savefig(p, bbox_inches="tight", dpi=120)
        paths.append(p)
    plt.close(fig)
    return paths


def plot_model_comparison(reports: Sequence[EvalReport], stem: str | Path, formats=FORMATS) -> list[Path]:
    """Side-by-side Dice and Hausdorff bars (mean ± std) per model."""
    names = [r.model for r in reports]
    aggs = [r.aggregate for r in reports]
    x = np.arange(len(names))
    fig, axes = plt.subplots(1, 2, figsize=(max(6, 1.6 * len(names) + 3), 3.6))
    for ax, key, label in ((axes[0], "dice", "Dice"), (axes[1], "hd", "Hausdorff (px)")):
        means = [a[f"mean_{key}"] for a in aggs]
        stds = [a[f"std_{key}"] for a in aggs]
        ax.bar(x, means, yerr=stds, capsize=4, color="#4c72b0", alpha=0.85)
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=20, ha="right")
        ax.set_ylabel(label)
        ax.grid(axis="y", alpha=0.3)
    axes[0].set_ylim(0, 1)
    fig.tight_layout()
    return _save(fig, Path(stem), formats)


def plot_refinement(before: Sequence[float], after: Sequence[float], stem: str | Path, formats=FORMATS) -> list[Path]:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(before, after, s=10, alpha=0.7)
    ax.plot([0, 1], [0, 1], "k--", lw=0.8)
    ax.set_xlabel("coarse Dice")
    ax.set_ylabel("refined Dice")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    return _save(fig, Path(stem), formats)


def plot_ablation(cells: Sequence[dict], stem: str | Path, formats=FORMATS) -> list[Path]:
    """Grouped bars: one group per seed count, one bar per seed position."""
    counts = sorted({c["count"] for c in cells})
    positions = [p for p in ("beginning", "middle", "end") if any(c["position"] == p for c in cells)]
    width = 0.8 / max(1, len(positions))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for j, pos in enumerate(positions):
        means, stds = [], []
        for n in counts:
            cell = next((c for c in cells if c["count"] == n and c["position"] == pos), None)
            means.append(cell["mean_dice"] if cell else np.nan)
            stds.append(cell["std_dice"] if cell else 0.0)
        ax.bar(np.arange(len(counts)) + j * width, means, width, yerr=stds, capsize=3, label=pos)
    ax.set_xticks(np.arange(len(counts)) + width * (len(positions) - 1) / 2)
    ax.set_xticklabels([str(n) for n in counts])
    ax.set_xlabel("seed slices")
    ax.set_ylabel("volume Dice")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    return _save(fig, Path(stem), formats)


def plot_training_curve(records: Sequence[dict], stem: str | Path, key: str = "mean_loss", formats=FORMATS) -> list[Path]:
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot([r["epoch"] for r in records], [r[key] for r in records], marker=".")
    ax.set_xlabel("epoch")
    ax.set_ylabel(key)
    ax.grid(alpha=0.3)
    return _save(fig, Path(stem), formats)
