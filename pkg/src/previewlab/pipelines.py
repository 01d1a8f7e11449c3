"""End-to-end recipes shared by the CLI and the acceptance suite.

Artifact builders are pure functions of their preset; each writes its
outputs plus a ``done.json`` marker keyed by the preset hash, so reruns load
from disk instead of retraining.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import worlds
from .decoder import (
    DecoderConfig,
    LossConfig,
    MBDecoder,
    ToyLossConfig,
    load_decoder,
    save_decoder,
    toy_mb_branch_samples,
    train_decoder,
    train_toy_mb,
)
from .diffusion import (
    DiffusionModel,
    NoiseSchedule,
    load_checkpoint,
    sample_ancestral,
    save_checkpoint,
    train_diffusion,
)
from .dit import DiTConfig
from .distill import (
    ConsistencyModel,
    distill_consistency,
    load_consistency,
    sample_onestep,
    save_consistency,
)
from .metrics import DotCountReport, dot_count_report
from .rng import stream


def _preset_hash(preset) -> str:
    doc = json.dumps(dataclasses.asdict(preset), sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:12]


def _is_done(directory: Path, key: str) -> bool:
    marker = directory / "done.json"
    if not marker.exists():
        return False
    return json.loads(marker.read_text()).get("preset_hash") == key


def _mark_done(directory: Path, key: str, extra: dict | None = None) -> None:
    doc = {"preset_hash": key}
    if extra:
        doc.update(extra)
    (directory / "done.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- dot world -----------------------------------------------------------------------


@dataclass(frozen=True)
class DotPreset:
    variant: str = "motion_only"
    seed: int = 0
    T: int = 1000
    dim: int = 64
    n_blocks: int = 4
    heads: int = 4
    train_steps: int = 1500
    train_lr: float = 1e-3
    train_batch: int = 8
    cd_steps: int = 600
    cd_lr: float = 1e-3
    cd_batch: int = 8
    ema_rate: float = 0.999
    cd_discretization: int = 50
    mb_branches: int = 4
    mb_steps: int = 500
    mb_lr: float = 2e-3
    mb_batch: int = 8
    mb_width: int = 64
    mb_depth: int = 4
    mb_lambda_ens: float = 0.25
    mb_ensemble_form: str = "per_branch"


@dataclass
class DotArtifacts:
    preset: DotPreset
    videos: list[np.ndarray]
    model: DiffusionModel
    student: ConsistencyModel
    toy_mb: MBDecoder
    directory: Path


def build_dot_world(preset: DotPreset, out_dir: str | Path) -> DotArtifacts:
    root = Path(out_dir) / f"dot_{preset.variant}"
    key = _preset_hash(preset)
    spec = worlds.DotSpec(variant=preset.variant)
    videos = worlds.gen_dot_dataset(spec)
    if _is_done(root, key):
        return DotArtifacts(
            preset=preset,
            videos=videos,
            model=load_checkpoint(root / "dit"),
            student=load_consistency(root / "cd"),
            toy_mb=load_decoder(root / "toy_mb"),
            directory=root,
        )
    root.mkdir(parents=True, exist_ok=True)
    worlds.save_dot_dataset(root / "dataset", videos, spec)
    cfg = DiTConfig(
        frames=spec.frames,
        height=spec.grid,
        width=spec.grid,
        channels=1,
        dim=preset.dim,
        n_blocks=preset.n_blocks,
        heads=preset.heads,
    )
    model = DiffusionModel(cfg, NoiseSchedule.linear(preset.T), seed=preset.seed)
    losses = train_diffusion(
        model, videos, preset.train_steps, preset.train_lr, preset.seed, batch=preset.train_batch
    )
    save_checkpoint(root / "dit", model, extra={"train_loss_tail": float(np.mean(losses[-50:]))})
    student, cd_losses = distill_consistency(
        model,
        videos,
        preset.cd_steps,
        preset.cd_lr,
        preset.seed,
        batch=preset.cd_batch,
        ema_rate=preset.ema_rate,
        n_discretization=preset.cd_discretization,
    )
    save_consistency(root / "cd", student)
    toy_mb, _ = train_toy_mb(
        model,
        videos,
        preset.mb_branches,
        preset.mb_steps,
        preset.mb_lr,
        preset.seed,
        batch=preset.mb_batch,
        width=preset.mb_width,
        depth=preset.mb_depth,
        loss_cfg=ToyLossConfig(lambda_ens=preset.mb_lambda_ens, ensemble_form=preset.mb_ensemble_form),
    )
    save_decoder(root / "toy_mb", toy_mb, extra={"tap_block": cfg.n_blocks - 2})
    _mark_done(root, key, {"train_losses": [float(v) for v in losses[::50]], "cd_losses": [float(v) for v in cd_losses[::50]]})
    return DotArtifacts(preset=preset, videos=videos, model=model, student=student, toy_mb=toy_mb, directory=root)


def toy_table_rows(art: DotArtifacts, n_samples: int = 64, seed: int = 123, full_steps: int = 1000) -> list[dict]:
    """The dot-count table: per-method mean/std over n_samples draws."""
    rows = []

    def add(method: str, nfe: str, report: DotCountReport):
        rows.append(
            {
                "variant": art.preset.variant,
                "method": method,
                "nfe": nfe,
                "mean_boxes": round(report.mean, 3),
                "std_boxes": round(report.std, 3),
            }
        )

    k = art.toy_mb.cfg.branches
    branch_samples = toy_mb_branch_samples(art.model, art.toy_mb, seed, n_samples)
    per_branch = [dot_count_report(branch_samples[:, i]) for i in range(k)]
    add(
        "MB-Avg.",
        "1",
        DotCountReport(counts=[c for rep in per_branch for c in rep.counts]),
    )
    cd_samples = sample_onestep(art.student, seed, n_samples)
    add("CD", "1", dot_count_report(cd_samples))
    d20, _ = sample_ancestral(art.model, 20, seed, n_samples)
    add("DDPM", "20", dot_count_report(d20))
    d1k, x0_trace = sample_ancestral(art.model, full_steps, seed, n_samples, capture_x0=True)
    preview_idx = full_steps - 200 if full_steps > 200 else len(x0_trace) // 2
    add("DDPM", "200 Prev.", dot_count_report(x0_trace[preview_idx]))
    add("DDPM", "1K", dot_count_report(d1k))
    gt = dot_count_report(np.stack(art.videos))
    add("GT", "-", gt)
    return rows


# -- shapes world -----------------------------------------------------------------------


@dataclass(frozen=True)
class ShapesPreset:
    seed: int = 0
    grid: int = 16
    frames: int = 8
    min_shapes: int = 1
    max_shapes: int = 3
    n_train: int = 512
    n_val: int = 64
    T: int = 50
    dim: int = 128
    n_blocks: int = 6
    heads: int = 4
    train_steps: int = 3000
    train_lr: float = 1e-3
    train_batch: int = 6
    tap_fractions: tuple[float, ...] = (0.1, 0.2, 0.5, 0.8)
    dec_branches: int = 4
    dec_width: int = 64
    dec_depth: int = 6
    dec_steps: int = 300
    dec_lr: float = 2e-3
    dec_batch: int = 4
    lambda_ens: float = 10.0
    lambda_edge: float = 0.1


# acceptance preset: small enough to train on one laptop core in minutes
SMALL_SHAPES = ShapesPreset(
    grid=10,
    frames=4,
    max_shapes=2,
    n_train=192,
    n_val=32,
    train_steps=1500,
    train_batch=6,
)


@dataclass
class ShapesArtifacts:
    preset: ShapesPreset
    train: list[worlds.IntrinsicsBundle]
    val: list[worlds.IntrinsicsBundle]
    model: DiffusionModel
    mb: MBDecoder
    naive: MBDecoder
    directory: Path

    @property
    def tap_block(self) -> int:
        return self.preset.n_blocks - 2

    @property
    def tap_steps(self) -> list[int]:
        return [max(1, round(f * self.preset.T)) for f in self.preset.tap_fractions]


def shapes_config(preset: ShapesPreset) -> worlds.ShapesConfig:
    return worlds.ShapesConfig(
        grid=preset.grid, frames=preset.frames, min_shapes=preset.min_shapes, max_shapes=preset.max_shapes
    )


def gen_split_scenes(preset: ShapesPreset) -> tuple[list, list]:
    cfg = shapes_config(preset)
    bundles = worlds.gen_shapes_dataset(preset.seed, cfg, preset.n_train + preset.n_val)
    ratios = (preset.n_train / len(bundles), preset.n_val / len(bundles))
    return worlds.split_dataset(bundles, ratios, preset.seed)


def feature_pairs(
    model: DiffusionModel,
    bundles: list[worlds.IntrinsicsBundle],
    tap_block: int,
    tap_steps: list[int],
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Forward-noise each scene at each tap step; returns (features, target stacks)."""
    rgb = np.stack([b.rgb for b in bundles])
    stacks = np.stack([b.stack() for b in bundles])
    feats, targets = [], []
    for t in tap_steps:
        t_eval = min(t, model.schedule.T - 1)
        sigma = model.schedule.sigma[t]
        noise = np.stack(
            [stream(seed, "decnoise", t, i).standard_normal(rgb.shape[1:]).astype(np.float32) for i in range(len(rgb))]
        )
        x_t = ((1.0 - sigma) * rgb + sigma * noise).astype(np.float32)
        _, captured = model.predict_eps(x_t, t_eval, taps=[tap_block])
        feats.append(captured[tap_block])
        targets.append(stacks)
    return np.concatenate(feats), np.concatenate(targets).astype(np.float32)


def build_shapes_world(preset: ShapesPreset, out_dir: str | Path) -> ShapesArtifacts:
    root = Path(out_dir) / f"shapes_{preset.grid}x{preset.frames}"
    key = _preset_hash(preset)
    train, val = gen_split_scenes(preset)
    if _is_done(root, key):
        return ShapesArtifacts(
            preset=preset,
            train=train,
            val=val,
            model=load_checkpoint(root / "dit"),
            mb=load_decoder(root / "decoder_mb"),
            naive=load_decoder(root / "decoder_naive"),
            directory=root,
        )
    root.mkdir(parents=True, exist_ok=True)
    worlds.save_shapes_dataset(root / "dataset", train + val, shapes_config(preset), preset.seed)
    cfg = DiTConfig(
        frames=preset.frames,
        height=preset.grid,
        width=preset.grid,
        channels=3,
        dim=preset.dim,
        n_blocks=preset.n_blocks,
        heads=preset.heads,
    )
    model = DiffusionModel(cfg, NoiseSchedule.linear(preset.T), seed=preset.seed)
    losses = train_diffusion(
        model,
        [b.rgb for b in train],
        preset.train_steps,
        preset.train_lr,
        preset.seed,
        batch=preset.train_batch,
    )
    save_checkpoint(root / "dit", model, extra={"train_loss_tail": float(np.mean(losses[-50:]))})

    tap_block = preset.n_blocks - 2
    tap_steps = [max(1, round(f * preset.T)) for f in preset.tap_fractions]
    feats, targets = feature_pairs(model, train, tap_block, tap_steps, preset.seed)
    loss_cfg = LossConfig(lambda_ens=preset.lambda_ens, lambda_edge=preset.lambda_edge)
    mb = MBDecoder(
        DecoderConfig(in_channels=preset.dim, branches=preset.dec_branches, width=preset.dec_width, depth=preset.dec_depth),
        seed=preset.seed,
    )
    train_decoder(mb, feats, targets, loss_cfg, preset.dec_steps, preset.dec_lr, preset.seed, batch=preset.dec_batch)
    save_decoder(root / "decoder_mb", mb, extra={"tap_block": tap_block, "tap_steps": tap_steps})
    naive = MBDecoder(
        DecoderConfig(in_channels=preset.dim, branches=1, width=preset.dec_width, depth=preset.dec_depth),
        seed=preset.seed + 1,
    )
    naive_cfg = LossConfig(lambda_ens=0.0, lambda_edge=preset.lambda_edge)
    train_decoder(naive, feats, targets, naive_cfg, preset.dec_steps, preset.dec_lr, preset.seed, batch=preset.dec_batch)
    save_decoder(root / "decoder_naive", naive, extra={"tap_block": tap_block, "tap_steps": tap_steps})
    _mark_done(root, key, {"train_losses": [float(v) for v in losses[::50]]})
    return ShapesArtifacts(preset=preset, train=train, val=val, model=model, mb=mb, naive=naive, directory=root)
