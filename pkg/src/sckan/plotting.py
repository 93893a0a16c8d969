"""Matplotlib figures written next to the CSV/markdown reports."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_KEYS = ("seg_l", "seg_u", "proto_l", "proto_u", "spcl", "total")


def _finish(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def loss_curves(log: Sequence[dict], path: str | Path, window: int = 25) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = [r["step"] for r in log]
    for key in LOSS_KEYS:
        vals = [r[key] for r in log]
        if not any(vals):
            continue
        smooth = [sum(vals[max(0, i - window + 1) : i + 1]) / len(vals[max(0, i - window + 1) : i + 1]) for i in range(len(vals))]
        ax.plot(steps, smooth, label=key, lw=1.2)
    ax2 = ax.twinx()
    ax2.plot(steps, [r["lambda_gs"] for r in log], color="0.6", ls="--", lw=1)
    ax2.set_ylabel("warm-up weight")
    ax.set_xlabel("step")
    ax.set_ylabel(f"loss (moving mean, {window} steps)")
    ax.legend(fontsize=8, ncol=3)
    return _finish(fig, Path(path))


def cell_bars(rows: Sequence[dict], path: str | Path, metric: str = "dice") -> Path:
    """Bar chart of one metric's mean +- std per ablation cell."""
    names = [r["cell"] for r in rows]
    means = [r.get(f"{metric}_mean") or 0.0 for r in rows]
    stds = [r.get(f"{metric}_std") or 0.0 for r in rows]
    fig, ax = plt.subplots(figsize=(max(4, 1.1 * len(rows) + 2), 3.6))
    ax.bar(range(len(rows)), means, yerr=stds, capsize=4, color="#4c72b0")
    ax.set_xticks(range(len(rows)), names, rotation=20, ha="right")
    ax.set_ylabel(f"test {metric}")
    return _finish(fig, Path(path))


def gap_bars(rows: Sequence[dict], path: str | Path) -> Path:
    names = [r["cell"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(4, 1.4 * len(rows) + 2), 3.6))
    width = 0.27
    for j, (key, color) in enumerate((("l_dice", "#55a868"), ("u_dice", "#c44e52"), ("gap", "#8172b2"))):
        xs = [i + (j - 1) * width for i in range(len(rows))]
        ax.bar(xs, [r.get(f"{key}_mean") or 0.0 for r in rows], width,
               yerr=[r.get(f"{key}_std") or 0.0 for r in rows], capsize=3, label=key, color=color)
    ax.set_xticks(range(len(rows)), names)
    ax.axhline(0, color="k", lw=0.6)
    ax.legend(fontsize=8)
    ax.set_ylabel("Dice")
    return _finish(fig, Path(path))


def sweep_line(xs: Sequence[float], rows: Sequence[dict], path: str | Path, xlabel: str, metric: str = "dice") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.6))
    means = [r.get(f"{metric}_mean") for r in rows]
    stds = [r.get(f"{metric}_std") or 0.0 for r in rows]
    pts = [(x, m, s) for x, m, s in zip(xs, means, stds) if m is not None]
    if pts:
        ax.errorbar([p[0] for p in pts], [p[1] for p in pts], yerr=[p[2] for p in pts], marker="o", capsize=4)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(f"test {metric}")
    return _finish(fig, Path(path))
