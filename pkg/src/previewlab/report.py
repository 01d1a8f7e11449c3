"""Figure and table rendering for CLI reports.

Every artifact-producing command writes its delimited output (CSV / JSON)
next to rendered matplotlib PNGs so a run directory is self-describing.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

TOY_TABLE_FIELDS = ["variant", "method", "nfe", "mean_boxes", "std_boxes"]


def save_toy_table(rows: list[dict], csv_path: str | Path, md_path: str | Path) -> None:
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TOY_TABLE_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    lines = ["| Data | Method | NFE | Mean #Boxes | Std. #Boxes |", "|---|---|---|---|---|"]
    for r in rows:
        lines.append(
            f"| {r['variant']} | {r['method']} | {r['nfe']} | {r['mean_boxes']:.1f} | {r['std_boxes']:.1f} |"
        )
    Path(md_path).write_text("\n".join(lines) + "\n")


def save_frame_grid(videos: list[np.ndarray], path: str | Path, labels: list[str] | None = None) -> None:
    """Rows = samples, columns = frames. Accepts (F, H, W, C) arrays with C in {1, 3}."""
    n = len(videos)
    frames = videos[0].shape[0]
    fig, axes = plt.subplots(n, frames, figsize=(1.2 * frames, 1.2 * n), squeeze=False)
    for i, video in enumerate(videos):
        for f in range(frames):
            ax = axes[i][f]
            img = np.clip(video[f], 0.0, 1.0)
            if img.shape[-1] == 1:
                ax.imshow(img[..., 0], cmap="gray", vmin=0, vmax=1, interpolation="nearest")
            else:
                ax.imshow(img, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if f == 0 and labels is not None:
                ax.set_ylabel(labels[i], fontsize=7)
    fig.tight_layout(pad=0.2)
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_loss_curve(losses: list[float], path: str | Path, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(losses, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_sweep_heatmaps(sweep, out_dir: str | Path, kind: str = "linear") -> list[Path]:
    """One loss heatmap (blocks x timesteps) per channel."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for channel in sweep.channels:
        grid = sweep.grid_for(channel, kind)
        fig, ax = plt.subplots(figsize=(5, 3))
        im = ax.imshow(grid, aspect="auto", cmap="viridis")
        ax.set_xlabel("timestep cell (noisy to clean)")
        ax.set_ylabel("block")
        ax.set_title(f"{channel} probe loss")
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        p = out / f"sweep_{channel}_{kind}.png"
        fig.savefig(p, dpi=150)
        plt.close(fig)
        paths.append(p)
    return paths


def save_trace_plot(trace: list[float], path: str | Path, title: str = "steering loss") -> None:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(trace, lw=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("best-so-far loss")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
