"""Linear and small convolutional probes from feature taps to intrinsics.

A probe cell is one (kind, channel, block, timestep) tuple. ``run_sweep``
populates the full grid: for each timestep it forward-noises every scene,
taps all blocks in one pass, and trains one probe per cell on the train
split, reporting validation loss and PSNR. The timestep axis is ordered by
denoising progress, noisiest first.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from . import worlds
from .diffusion import DiffusionModel
from .metrics import psnr
from .nn import cosine_distance, mse
from .optim import Adam
from .rng import stream
from .tensor import Tensor, no_grad

PROBE_EPOCHS = 200
PROBE_LR = 1e-2
PROBE_PLATEAU = 20


@dataclass(frozen=True)
class ProbeSpec:
    kind: str  # "linear" | "conv3d_small"
    channel: str  # one of worlds.CHANNELS names
    block: int
    step: int

    @property
    def loss_name(self) -> str:
        return "cosine" if self.channel == "normals" else "mse"


class LinearProbe:
    def __init__(self, din: int, dout: int, seed: int):
        rng = stream(seed, "init")
        self.w = Tensor((rng.standard_normal((din, dout)) * 0.01).astype(np.float32), requires_grad=True)
        self.b = Tensor(np.zeros(dout, dtype=np.float32), requires_grad=True)

    def forward_graph(self, f: Tensor) -> Tensor:
        return T.matmul(f, self.w) + self.b

    def predict(self, feats: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward_graph(Tensor(feats)).data

    def params(self):
        return [self.w, self.b]


class ConvProbe:
    """Two 3x3x3 conv layers; the small nonlinear comparison probe."""

    def __init__(self, din: int, dout: int, seed: int, width: int = 16):
        from .nn import Conv3d

        rng = stream(seed, "init")
        self.c1 = Conv3d(din, width, (3, 3, 3), rng)
        self.c2 = Conv3d(width, dout, (3, 3, 3), rng)

    def forward_graph(self, f: Tensor) -> Tensor:
        return self.c2(T.relu(self.c1(f)))

    def predict(self, feats: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward_graph(Tensor(feats)).data

    def params(self):
        return [p for m in (self.c1, self.c2) for p in m.params().values()]


def _probe_loss(pred: Tensor, target: np.ndarray, channel: str) -> Tensor:
    if channel == "normals":
        return cosine_distance(pred, Tensor(target))
    return mse(pred, Tensor(target))


def train_probe(
    spec: ProbeSpec,
    feats_train: np.ndarray,
    target_train: np.ndarray,
    feats_val: np.ndarray,
    target_val: np.ndarray,
    seed: int = 0,
    epochs: int = PROBE_EPOCHS,
    lr: float = PROBE_LR,
):
    """Fixed-budget Adam fit with plateau early-stop. Returns (probe, val_loss)."""
    if feats_train.size == 0:
        raise ValueError("empty probe dataset")
    dout = target_train.shape[-1]
    if spec.kind == "linear":
        probe = LinearProbe(feats_train.shape[-1], dout, seed)
        ft = feats_train.reshape(-1, feats_train.shape[-1])
        tt = target_train.reshape(-1, dout)
    elif spec.kind == "conv3d_small":
        probe = ConvProbe(feats_train.shape[-1], dout, seed)
        ft, tt = feats_train, target_train
    else:
        raise ValueError(f"unknown probe kind {spec.kind!r}")
    opt = Adam(probe.params(), lr=lr)
    best, stale = np.inf, 0
    for _ in range(epochs):
        pred = probe.forward_graph(Tensor(ft))
        loss = _probe_loss(pred, tt, spec.channel)
        value = loss.item()
        opt.zero_grad()
        loss.backward()
        opt.step()
        if value < best - 1e-6:
            best, stale = value, 0
        else:
            stale += 1
            if stale >= PROBE_PLATEAU:
                break
    val_pred = probe.predict(feats_val.reshape(-1, feats_val.shape[-1]) if spec.kind == "linear" else feats_val)
    val_target = target_val.reshape(-1, dout) if spec.kind == "linear" else target_val
    with no_grad():
        val_loss = _probe_loss(Tensor(val_pred), val_target, spec.channel).item()
    return probe, float(val_loss)


@dataclass
class SweepResult:
    blocks: list[int]
    steps: list[int]  # descending step indices (noisiest first)
    channels: list[str]
    kinds: list[str]
    cells: dict[tuple[str, str, int, int], dict[str, float]] = field(default_factory=dict)

    def put(self, kind: str, channel: str, block: int, step: int, loss: float, psnr_db: float) -> None:
        self.cells[(kind, channel, block, step)] = {"loss": loss, "psnr": psnr_db}

    def grid_for(self, channel: str, kind: str = "linear") -> np.ndarray:
        return np.array(
            [[self.cells[(kind, channel, b, t)]["loss"] for t in self.steps] for b in self.blocks]
        )

    def psnr_for(self, channel: str, kind: str = "linear") -> np.ndarray:
        return np.array(
            [[self.cells[(kind, channel, b, t)]["psnr"] for t in self.steps] for b in self.blocks]
        )

    def validate_complete(self) -> None:
        for kind in self.kinds:
            for c in self.channels:
                for b in self.blocks:
                    for t in self.steps:
                        if (kind, c, b, t) not in self.cells:
                            raise ValueError(f"sweep grid has a hole at {(kind, c, b, t)}")

    def to_json(self) -> dict:
        return {
            "blocks": self.blocks,
            "steps": self.steps,
            "channels": self.channels,
            "kinds": self.kinds,
            "cells": [
                {"kind": k, "channel": c, "block": b, "step": t, **vals}
                for (k, c, b, t), vals in sorted(self.cells.items())
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SweepResult":
        res = cls(blocks=d["blocks"], steps=d["steps"], channels=d["channels"], kinds=d["kinds"])
        for cell in d["cells"]:
            res.put(cell["kind"], cell["channel"], cell["block"], cell["step"], cell["loss"], cell["psnr"])
        return res

    def write(self, json_path: str | Path, csv_path: str | Path) -> None:
        Path(json_path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["block", "t", "channel", "kind", "loss", "psnr"])
            for (kind, channel, block, step), vals in sorted(self.cells.items()):
                writer.writerow([block, step, channel, kind, f"{vals['loss']:.6g}", f"{vals['psnr']:.4f}"])


def sweep_steps(T_total: int, n_cells: int = 10) -> list[int]:
    """Evenly spaced step indices from the top of the schedule, noisiest first."""
    return [round(T_total * (n_cells - i) / n_cells) for i in range(n_cells)]


def run_sweep(
    model: DiffusionModel,
    train_bundles: list[worlds.IntrinsicsBundle],
    val_bundles: list[worlds.IntrinsicsBundle],
    kinds: tuple[str, ...] = ("linear",),
    n_timesteps: int = 10,
    seed: int = 0,
) -> SweepResult:
    """Train one probe per grid cell; returns the fully populated grid."""
    blocks = list(range(model.cfg.n_blocks))
    steps = sweep_steps(model.schedule.T, n_timesteps)
    channels = [name for name, _ in worlds.CHANNELS]
    result = SweepResult(blocks=blocks, steps=steps, channels=channels, kinds=list(kinds))

    train_rgb = np.stack([b.rgb for b in train_bundles])
    val_rgb = np.stack([b.rgb for b in val_bundles])
    train_stack = np.stack([b.stack() for b in train_bundles])
    val_stack = np.stack([b.stack() for b in val_bundles])

    for t in steps:
        t_eval = min(t, model.schedule.T - 1)
        sigma = model.schedule.sigma[t]
        feats = {}
        for tag, rgb in (("train", train_rgb), ("val", val_rgb)):
            noise = np.stack(
                [stream(seed, "probenoise", t, i).standard_normal(rgb.shape[1:]).astype(np.float32) for i in range(len(rgb))]
            )
            x_t = ((1.0 - sigma) * rgb + sigma * noise).astype(np.float32)
            _, captured = model.predict_eps(x_t, t_eval, taps=blocks)
            feats[tag] = captured
        for b in blocks:
            for channel in channels:
                sl = worlds.channel_slice(channel)
                for kind in kinds:
                    spec = ProbeSpec(kind=kind, channel=channel, block=b, step=t)
                    probe, val_loss = train_probe(
                        spec,
                        feats["train"][b],
                        train_stack[..., sl],
                        feats["val"][b],
                        val_stack[..., sl],
                        seed=seed,
                    )
                    pred = probe.predict(
                        feats["val"][b].reshape(-1, model.cfg.dim) if kind == "linear" else feats["val"][b]
                    ).reshape(val_stack[..., sl].shape)
                    gt = val_stack[..., sl]
                    if channel == "normals":
                        db = psnr((pred + 1) / 2, (gt + 1) / 2)
                    else:
                        db = psnr(pred, gt)
                    result.put(kind, channel, b, t, val_loss, db)
    result.validate_complete()
    return result
