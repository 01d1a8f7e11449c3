"""Quantitative evaluation: dot counting, bundle errors, diversity, trends."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import worlds

PSNR_CAP = 99.0


def psnr(pred: np.ndarray, gt: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical inputs cap at 99 dB."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


def count_dots(video: np.ndarray, threshold: float = 0.5) -> int:
    """Sum over frames of 4-connected components with intensity above threshold."""
    v = np.asarray(video)
    if v.ndim == 4:
        if v.shape[-1] != 1:
            raise ValueError("count_dots expects a single-channel video")
        v = v[..., 0]
    total = 0
    for frame in v:
        mask = frame > threshold
        seen = np.zeros_like(mask, dtype=bool)
        h, w = mask.shape
        for i in range(h):
            for j in range(w):
                if mask[i, j] and not seen[i, j]:
                    total += 1
                    stack = [(i, j)]
                    seen[i, j] = True
                    while stack:
                        y, x = stack.pop()
                        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                            ny, nx = y + dy, x + dx
                            if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                                seen[ny, nx] = True
                                stack.append((ny, nx))
    return total


@dataclass
class DotCountReport:
    counts: list[int]
    threshold: float = 0.5

    @property
    def mean(self) -> float:
        return float(np.mean(self.counts))

    @property
    def std(self) -> float:
        # population std, matching how the reference table reports spread
        return float(np.std(self.counts))


def dot_count_report(videos: np.ndarray, threshold: float = 0.5) -> DotCountReport:
    return DotCountReport(counts=[count_dots(v, threshold) for v in videos], threshold=threshold)


def bundle_metrics(pred: worlds.IntrinsicsBundle, gt: worlds.IntrinsicsBundle) -> dict[str, dict[str, float]]:
    """Per-channel L1 / MSE / PSNR, plus cosine error for normals."""
    out: dict[str, dict[str, float]] = {}
    for name, _ in worlds.CHANNELS:
        p, g = pred.get(name), gt.get(name)
        if p.shape != g.shape:
            raise ValueError(f"channel {name} shape mismatch {p.shape} vs {g.shape}")
        entry = {
            "l1": float(np.mean(np.abs(p - g))),
            "mse": float(np.mean((p - g) ** 2)),
            "psnr": psnr(p if name != "normals" else (p + 1) / 2, g if name != "normals" else (g + 1) / 2),
        }
        if name == "normals":
            dot = (p * g).sum(-1)
            denom = np.linalg.norm(p, axis=-1) * np.linalg.norm(g, axis=-1) + 1e-8
            entry["cosine"] = float(np.mean(1.0 - dot / denom))
        out[name] = entry
    return out


def diversity(branches: list[np.ndarray]) -> float:
    """Mean pairwise per-pixel L1 distance across branch outputs."""
    if len(branches) < 2:
        raise ValueError("diversity needs at least 2 branches")
    total, pairs = 0.0, 0
    for i in range(len(branches)):
        for j in range(i + 1, len(branches)):
            total += float(np.mean(np.abs(branches[i] - branches[j])))
            pairs += 1
    return total / pairs


def spearman(xs: np.ndarray, ys: np.ndarray) -> float:
    rho = stats.spearmanr(xs, ys).statistic
    return float(rho)


def saturation_fraction(losses: list[float], tolerance: float = 1.1) -> float:
    """Earliest position (as a fraction of the series) within tolerance of the minimum."""
    arr = np.asarray(losses, dtype=np.float64)
    if arr.size == 0 or not np.all(np.isfinite(arr)):
        raise ValueError("incomplete loss series")
    floor = arr.min() * tolerance
    idx = int(np.argmax(arr <= floor))
    return idx / (arr.size - 1) if arr.size > 1 else 0.0


def trend_stats(sweep: "SweepResult") -> dict[str, dict[str, float]]:
    """Per-channel monotonicity and saturation statistics of a probe sweep.

    The timestep axis is ordered by denoising progress (noisiest first). For
    each channel: spearman of best-over-blocks PSNR against progress, the
    saturation fraction of the best-over-blocks loss series, and per-block
    mean losses for the block-profile comparison.
    """
    out: dict[str, dict[str, float]] = {}
    for channel in sweep.channels:
        grid = sweep.grid_for(channel)  # (blocks, timesteps) losses
        psnr_grid = sweep.psnr_for(channel)
        best_loss = grid.min(axis=0)
        best_psnr = psnr_grid.max(axis=0)
        progress = np.arange(best_loss.size, dtype=np.float64)
        out[channel] = {
            "spearman_psnr": spearman(progress, best_psnr),
            "saturation_fraction": saturation_fraction(list(best_loss)),
            "block_mean_loss": [float(v) for v in grid.mean(axis=1)],
        }
    return out
