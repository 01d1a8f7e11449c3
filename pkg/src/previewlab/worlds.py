"""Procedural toy worlds with exact ground truth.

Two families:

* Moving-dot videos: 4 frames of a 7x7 grid with a single white dot that
  moves left, moves right, or stays put. The ``motion_position`` variant also
  jitters the start column over {2, 3, 4}, which makes the dot exit the frame
  in exactly 2 of the 9 sequences.
* Shape scenes: layered axis-aligned rectangles and circles with analytic
  intrinsics (base color, depth, normals, roughness, metallicity) and a
  Lambertian-shaded RGB render under a fixed directional light.

All generation is a pure function of (seed, config); re-generation is
byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import blob
from .rng import stream

LIGHT_DIR = np.array([1.0, 1.0, 2.0]) / np.linalg.norm([1.0, 1.0, 2.0])

PALETTE = np.array(
    [
        [0.90, 0.10, 0.10],
        [0.10, 0.80, 0.20],
        [0.15, 0.25, 0.90],
        [0.95, 0.85, 0.10],
        [0.85, 0.15, 0.80],
        [0.10, 0.80, 0.85],
        [0.95, 0.50, 0.10],
        [0.90, 0.90, 0.90],
    ],
    dtype=np.float32,
)

BACKGROUND_COLOR = np.array([0.12, 0.12, 0.12], dtype=np.float32)
BACKGROUND_ROUGHNESS = 0.9
BACKGROUND_METALLICITY = 0.0

# (name, channel count); the stacking order used everywhere downstream
CHANNELS: tuple[tuple[str, int], ...] = (
    ("base_color", 3),
    ("depth", 1),
    ("normals", 3),
    ("roughness", 1),
    ("metallicity", 1),
    ("rgb", 3),
)

CHANNEL_DIM = sum(c for _, c in CHANNELS)


def channel_slice(name: str) -> slice:
    off = 0
    for n, c in CHANNELS:
        if n == name:
            return slice(off, off + c)
        off += c
    raise KeyError(f"unknown channel {name!r}")


@dataclass
class IntrinsicsBundle:
    """Per-pixel scene decomposition; all maps share (frames, H, W, .)."""

    base_color: np.ndarray
    depth: np.ndarray
    normals: np.ndarray
    roughness: np.ndarray
    metallicity: np.ndarray
    rgb: np.ndarray

    def stack(self) -> np.ndarray:
        return np.concatenate(
            [getattr(self, name) for name, _ in CHANNELS], axis=-1
        ).astype(np.float32)

    @classmethod
    def from_stack(cls, arr: np.ndarray) -> "IntrinsicsBundle":
        return cls(**{name: arr[..., channel_slice(name)].copy() for name, _ in CHANNELS})

    def get(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def validate(self) -> None:
        shapes = {getattr(self, n).shape[:3] for n, _ in CHANNELS}
        if len(shapes) != 1:
            raise ValueError(f"channel groups disagree on frames/H/W: {shapes}")
        norms = np.linalg.norm(self.normals, axis=-1)
        if np.abs(norms - 1.0).max() > 1e-4:
            raise ValueError("normals are not unit length")


# -- moving-dot worlds ---------------------------------------------------------

MOTIONS = ("left", "right", "stay")
_MOTION_STEP = {"left": -1, "right": 1, "stay": 0}


@dataclass(frozen=True)
class DotSpec:
    variant: str = "motion_only"  # or "motion_position"
    grid: int = 7
    frames: int = 4
    row: int = 3
    step: int = 1

    @property
    def start_columns(self) -> tuple[int, ...]:
        return (3,) if self.variant == "motion_only" else (2, 3, 4)


def gen_dot_dataset(spec: DotSpec) -> list[np.ndarray]:
    """Enumerate every dot sequence as a (frames, grid, grid, 1) binary video."""
    if spec.variant not in ("motion_only", "motion_position"):
        raise ValueError(f"unknown dot variant {spec.variant!r}")
    videos = []
    for motion in MOTIONS:
        for start in spec.start_columns:
            video = np.zeros((spec.frames, spec.grid, spec.grid, 1), dtype=np.float32)
            for f in range(spec.frames):
                col = start + _MOTION_STEP[motion] * spec.step * f
                if 0 <= col < spec.grid:
                    video[f, spec.row, col, 0] = 1.0
            videos.append(video)
    return videos


# -- shapes world ---------------------------------------------------------------


@dataclass(frozen=True)
class ShapesConfig:
    grid: int = 16
    frames: int = 8
    min_shapes: int = 1
    max_shapes: int = 3

    def to_json(self) -> dict:
        return {
            "grid": self.grid,
            "frames": self.frames,
            "min_shapes": self.min_shapes,
            "max_shapes": self.max_shapes,
        }


def sphere_cap_normal(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Unit normal of a sphere cap at radius-normalized offsets (dx, dy)."""
    r2 = np.clip(dx * dx + dy * dy, 0.0, 1.0)
    nz = np.sqrt(1.0 - r2)
    return np.stack([dx, dy, nz], axis=-1).astype(np.float32)


def _shade(base_color: np.ndarray, normals: np.ndarray) -> np.ndarray:
    lambert = np.clip(normals @ LIGHT_DIR.astype(np.float32), 0.0, 1.0)
    return np.clip(base_color * lambert[..., None], 0.0, 1.0).astype(np.float32)


def gen_shapes_scene(seed: int, config: ShapesConfig, scene_index: int = 0) -> tuple[np.ndarray, IntrinsicsBundle]:
    """One layered shapes scene. Returns (rgb video, full intrinsics bundle)."""
    rng = stream(seed, "shapes", scene_index)
    g, f = config.grid, config.frames
    n_shapes = int(rng.integers(config.min_shapes, config.max_shapes + 1))

    base = np.broadcast_to(BACKGROUND_COLOR, (f, g, g, 3)).copy()
    depth = np.zeros((f, g, g, 1), dtype=np.float32)
    normals = np.zeros((f, g, g, 3), dtype=np.float32)
    normals[..., 2] = 1.0
    rough = np.full((f, g, g, 1), BACKGROUND_ROUGHNESS, dtype=np.float32)
    metal = np.full((f, g, g, 1), BACKGROUND_METALLICITY, dtype=np.float32)

    color_ids = rng.choice(len(PALETTE), size=n_shapes, replace=False)
    ys, xs = np.mgrid[0:g, 0:g].astype(np.float32)

    for layer in range(1, n_shapes + 1):
        kind = "circle" if rng.random() < 0.5 else "rect"
        color = PALETTE[color_ids[layer - 1]]
        shape_rough = float(rng.uniform(0.05, 0.95))
        shape_metal = float(rng.uniform(0.0, 1.0))
        cx = float(rng.uniform(g * 0.2, g * 0.8))
        cy = float(rng.uniform(g * 0.2, g * 0.8))
        vx = int(rng.integers(-1, 2))
        vy = int(rng.integers(-1, 2))
        layer_depth = layer / n_shapes
        if kind == "circle":
            radius = float(rng.uniform(g * 0.12, g * 0.24))
        else:
            hw = float(rng.uniform(g * 0.10, g * 0.22))
            hh = float(rng.uniform(g * 0.10, g * 0.22))
        for frame in range(f):
            ox = cx + vx * frame
            oy = cy + vy * frame
            if kind == "circle":
                dx = (xs - ox) / radius
                dy = (ys - oy) / radius
                mask = dx * dx + dy * dy <= 1.0
                n = sphere_cap_normal(dx, dy)
            else:
                mask = (np.abs(xs - ox) <= hw) & (np.abs(ys - oy) <= hh)
                n = np.zeros((g, g, 3), dtype=np.float32)
                n[..., 2] = 1.0
            base[frame][mask] = color
            depth[frame][mask] = layer_depth
            normals[frame][mask] = n[mask]
            rough[frame][mask] = shape_rough
            metal[frame][mask] = shape_metal

    rgb = _shade(base, normals)
    bundle = IntrinsicsBundle(
        base_color=base.astype(np.float32),
        depth=depth,
        normals=normals,
        roughness=rough,
        metallicity=metal,
        rgb=rgb,
    )
    bundle.validate()
    return rgb, bundle


def gen_shapes_dataset(seed: int, config: ShapesConfig, count: int) -> list[IntrinsicsBundle]:
    return [gen_shapes_scene(seed, config, i)[1] for i in range(count)]


# -- splitting -------------------------------------------------------------------


def split_dataset(scenes: list, ratios: tuple[float, ...], seed: int) -> tuple[list, ...]:
    """Disjoint, seed-deterministic partition. Ratios must sum to 1."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    if not scenes:
        raise ValueError("cannot split an empty dataset")
    n = len(scenes)
    perm = stream(seed, "split").permutation(n)
    bounds = [0]
    acc = 0.0
    for r in ratios:
        acc += r
        bounds.append(int(round(acc * n)))
    bounds[-1] = n
    parts = []
    for i, r in enumerate(ratios):
        idx = perm[bounds[i] : bounds[i + 1]]
        if r > 0 and len(idx) == 0:
            raise ValueError(f"split {i} with ratio {r} received no scenes")
        parts.append([scenes[j] for j in idx])
    return tuple(parts)


# -- dataset directories ----------------------------------------------------------


def save_shapes_dataset(path: str | Path, bundles: list[IntrinsicsBundle], config: ShapesConfig, seed: int) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for i, b in enumerate(bundles):
        for name, _ in CHANNELS:
            blob.save(root / f"scene_{i:04d}.{name}.dbtn", b.get(name))
    manifest = {
        "kind": "shapes",
        "config": config.to_json(),
        "seed": seed,
        "count": len(bundles),
        "channels": [name for name, _ in CHANNELS],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_shapes_dataset(path: str | Path) -> tuple[list[IntrinsicsBundle], dict]:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    bundles = []
    for i in range(manifest["count"]):
        fields = {name: blob.load(root / f"scene_{i:04d}.{name}.dbtn") for name, _ in CHANNELS}
        bundles.append(IntrinsicsBundle(**fields))
    return bundles, manifest


def save_dot_dataset(path: str | Path, videos: list[np.ndarray], spec: DotSpec) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for i, v in enumerate(videos):
        blob.save(root / f"scene_{i:04d}.video.dbtn", v)
    manifest = {
        "kind": "dots",
        "config": {"variant": spec.variant, "grid": spec.grid, "frames": spec.frames},
        "seed": 0,
        "count": len(videos),
        "channels": ["video"],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dot_dataset(path: str | Path) -> tuple[list[np.ndarray], dict]:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    videos = [blob.load(root / f"scene_{i:04d}.video.dbtn") for i in range(manifest["count"])]
    return videos, manifest
