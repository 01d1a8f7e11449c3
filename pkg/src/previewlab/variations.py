"""Sibling generation: stochastic renoising and decoder-guided latent steering.

Renoising re-injects schedule-consistent noise into a clean estimate to
spawn independent siblings. Steering runs gradient descent on one feature
tap, through the frozen decoder, toward a constructed target map; the three
bundled target constructors recolor via K-means++ clusters, boost depth
edges with a Sobel operator, or flip the normals' y-axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .decoder import MBDecoder, _group_slices
from .diffusion import LatentState, NoiseSchedule
from .nn import cosine_distance, renormalize
from .optim import Adam
from .rng import stream
from .tensor import Tensor


def renoise(
    clean: np.ndarray, t_p: int, schedule: NoiseSchedule, seed: int, count: int = 1
) -> list[LatentState]:
    """Siblings z~ = (1 - sigma_tp) z0_hat + sigma_tp eps, one sub-stream each."""
    t_p = schedule.check_step(t_p)
    sigma = schedule.sigma[t_p]
    siblings = []
    for i in range(count):
        eps = stream(seed, "renoise", i).standard_normal(clean.shape).astype(np.float32)
        x = ((1.0 - sigma) * clean + sigma * eps).astype(np.float32)
        siblings.append(LatentState(x=x, step_index=t_p, schedule=schedule))
    return siblings


# -- k-means++ -------------------------------------------------------------------


def kmeans_pp(
    points: np.ndarray, k: int, seed: int, iters: int = 25
) -> tuple[np.ndarray, np.ndarray]:
    """K-means++ seeding followed by Lloyd iterations; deterministic per seed.

    If k exceeds the number of distinct points, duplicate centroids are
    permitted. Returns (centroids (k, d), assignment (n,)).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) == 0:
        raise ValueError("points must be a non-empty (n, d) array")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = stream(seed, "kmeans")
    n = len(pts)
    centroids = np.empty((k, pts.shape[1]))
    centroids[0] = pts[rng.integers(n)]
    d2 = ((pts - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j] = centroids[0]
        else:
            centroids[j] = pts[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((pts - centroids[j]) ** 2).sum(axis=1))
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        dists = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = dists.argmin(axis=1)
        for j in range(k):
            mask = new_assign == j
            if mask.any():
                centroids[j] = pts[mask].mean(axis=0)
        if np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
    return centroids.astype(np.float32), assign


# -- Sobel -------------------------------------------------------------------------

_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = _SOBEL_X.T


def sobel3(depth_map: np.ndarray) -> np.ndarray:
    """Per-frame 3x3 Sobel gradient magnitude with replicate padding."""
    d = np.asarray(depth_map, dtype=np.float64)
    squeeze = False
    if d.ndim == 4 and d.shape[-1] == 1:
        d = d[..., 0]
        squeeze = True
    elif d.ndim == 2:
        d = d[None]
    if d.ndim != 3:
        raise ValueError("sobel3 expects a single-channel map")
    out = np.zeros_like(d)
    for f in range(d.shape[0]):
        padded = np.pad(d[f], 1, mode="edge")
        gx = np.zeros_like(d[f])
        gy = np.zeros_like(d[f])
        for i in range(3):
            for j in range(3):
                window = padded[i : i + d.shape[1], j : j + d.shape[2]]
                gx += _SOBEL_X[i, j] * window
                gy += _SOBEL_Y[i, j] * window
        out[f] = np.sqrt(gx * gx + gy * gy)
    if squeeze:
        out = out[..., None]
    elif depth_map.ndim == 2:
        out = out[0]
    return out.astype(np.float32)


# -- steering targets ----------------------------------------------------------------


@dataclass
class SteeringTarget:
    modality: str  # base_color | depth | normals
    target: np.ndarray
    construction: dict

    def to_json(self) -> dict:
        return {"modality": self.modality, "construction": self.construction}


def make_target(preview: dict[str, np.ndarray], construction: dict, seed: int = 0) -> SteeringTarget:
    """Build a steering target from a decoded parent preview.

    construction: {"kind": "kmeans_recolor", "k": int, "from_cluster": int,
    "to_cluster": int} | {"kind": "sobel_edge_boost", "gain": float} |
    {"kind": "normal_flip_y"}.
    """
    kind = construction["kind"]
    if kind == "kmeans_recolor":
        k = int(construction.get("k", 3))
        if k < 2:
            raise ValueError("kmeans_recolor needs k >= 2")
        src = int(construction["from_cluster"])
        dst = int(construction["to_cluster"])
        if not (0 <= src < k and 0 <= dst < k):
            raise ValueError("cluster selection out of range")
        base = np.asarray(preview["base_color"], dtype=np.float32)
        flat = base.reshape(-1, 3)
        centroids, assign = kmeans_pp(flat, k, seed)
        if not np.any(assign == src):
            raise ValueError(f"source cluster {src} is empty")
        recolored = flat.copy()
        recolored[assign == src] = centroids[dst]
        return SteeringTarget("base_color", recolored.reshape(base.shape), construction)
    if kind == "sobel_edge_boost":
        gain = float(construction.get("gain", 1.0))
        depth = np.asarray(preview["depth"], dtype=np.float32)
        boosted = np.clip(depth + gain * sobel3(depth), 0.0, 1.0).astype(np.float32)
        return SteeringTarget("depth", boosted, construction)
    if kind == "normal_flip_y":
        n = np.asarray(preview["normals"], dtype=np.float32).copy()
        n[..., 1] *= -1.0
        norm = np.linalg.norm(n, axis=-1, keepdims=True)
        n = (n / np.maximum(norm, 1e-8)).astype(np.float32)
        return SteeringTarget("normals", n, construction)
    raise ValueError(f"unknown construction kind {kind!r}")


# -- latent steering ------------------------------------------------------------------


@dataclass
class SteerConfig:
    block: int
    step: int
    lr: float = 1e-2
    max_iters: int = 200
    plateau: int = 20
    target_reduction: float = 0.5
    mode: str = "steer_once"  # or "steer_window"
    window: int = 1

    def to_json(self) -> dict:
        return {
            "block": self.block,
            "step": self.step,
            "lr": self.lr,
            "max_iters": self.max_iters,
            "plateau": self.plateau,
            "target_reduction": self.target_reduction,
            "mode": self.mode,
            "window": self.window,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SteerConfig":
        return cls(**d)


@dataclass
class SteerResult:
    features: np.ndarray  # optimized tap, (frames, H, W, dim)
    initial_loss: float
    final_loss: float
    trace: list[float]  # best-so-far per iteration (non-increasing)
    raw_trace: list[float]
    converged: bool
    iterations: int


def _modality_loss(decoder: MBDecoder, f: Tensor, target: SteeringTarget) -> Tensor:
    _, ens = decoder.decode_graph(f)
    slices = _group_slices(decoder.cfg.channels)
    sl = slices[target.modality]
    pred = T.slice_axis(ens, sl.start, sl.stop, axis=-1)
    goal = target.target[None]
    if target.modality == "normals":
        return cosine_distance(pred, Tensor(goal))
    return T.reduce_mean(T.absolute(pred - goal))


def steer(decoder: MBDecoder, tap_features: np.ndarray, target: SteeringTarget, cfg: SteerConfig) -> SteerResult:
    """Gradient descent on the feature tap through the frozen decoder.

    The decoder weights are never touched; only the feature leaf receives
    updates. Stops at the configured loss reduction or on plateau; returns
    the best features seen, flagging non-convergence.
    """
    f = Tensor(np.asarray(tap_features, dtype=np.float32)[None].copy(), requires_grad=True)
    opt = Adam([f], lr=cfg.lr)
    initial = _modality_loss(decoder, f, target).item()
    best_val = initial
    best_feats = f.data[0].copy()
    goal = initial * cfg.target_reduction
    trace: list[float] = [initial]
    raw: list[float] = [initial]
    stale = 0
    converged = initial <= 0.0
    iters = 0
    if not converged:
        for it in range(cfg.max_iters):
            iters = it + 1
            loss = _modality_loss(decoder, f, target)
            value = loss.item()
            raw.append(value)
            if value < best_val - 1e-9:
                best_val = value
                best_feats = f.data[0].copy()
                stale = 0
            else:
                stale += 1
            trace.append(best_val)
            if best_val <= goal:
                converged = True
                break
            if stale >= cfg.plateau:
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
    return SteerResult(
        features=best_feats,
        initial_loss=initial,
        final_loss=best_val,
        trace=trace,
        raw_trace=raw,
        converged=converged,
        iterations=iters,
    )
