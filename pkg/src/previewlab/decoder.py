"""Multi-branch multi-loss preview decoder.

K independent convolutional heads read one feature tap and each emit a full
prediction; their arithmetic mean is the ensemble preview. Branch losses are
mode-seeking (L1 / cosine plus an edge-gradient term standing in for a
learned perceptual loss), while the ensemble loss anchors the branch mean to
the ground truth. Setting K = 1 with zero ensemble weight reproduces the
naive single-head predictor exactly.

The toy variant maps penultimate-block features of a trained dot model
straight to clean-video hypotheses in one network evaluation, trained with a
dataset-minimum L1 branch loss (the min over all 3 or 9 dataset elements is
exact) and a configurable ensemble term.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import blob
from . import tensor as T
from . import worlds
from .diffusion import DiffusionModel, DivergenceError
from .nn import Conv3d, Module, cosine_distance, renormalize
from .optim import Adam
from .rng import stream
from .tensor import Tensor, no_grad

# loss family per channel group: L1 on color-like and scalar maps, cosine on normals
CHANNEL_KIND = {
    "base_color": "l1",
    "rgb": "l1",
    "depth": "l1",
    "roughness": "l1",
    "metallicity": "l1",
    "normals": "cosine",
    "video": "l1",
}

TOY_CHANNELS: tuple[tuple[str, int], ...] = (("video", 1),)


@dataclass(frozen=True)
class DecoderConfig:
    in_channels: int
    branches: int = 4
    width: int = 64
    depth: int = 6  # total conv layers; 4 body + 2 refinement (upscale 1x here)
    channels: tuple[tuple[str, int], ...] = worlds.CHANNELS

    @property
    def out_channels(self) -> int:
        return sum(c for _, c in self.channels)

    def to_json(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "branches": self.branches,
            "width": self.width,
            "depth": self.depth,
            "channels": [[n, c] for n, c in self.channels],
        }

    @classmethod
    def from_json(cls, d: dict) -> "DecoderConfig":
        return cls(
            in_channels=d["in_channels"],
            branches=d["branches"],
            width=d["width"],
            depth=d["depth"],
            channels=tuple((n, c) for n, c in d["channels"]),
        )


@dataclass
class LossConfig:
    lambda_ens: float = 10.0
    lambda_edge: float = 0.1
    ensemble_form: str = "mean"  # "mean": MSE on the branch average; "per_branch": average of per-branch MSEs


def _group_slices(channels: tuple[tuple[str, int], ...]) -> dict[str, slice]:
    out, off = {}, 0
    for name, c in channels:
        out[name] = slice(off, off + c)
        off += c
    return out


class MBDecoder(Module):
    def __init__(self, cfg: DecoderConfig, seed: int):
        rng = stream(seed, "init")
        self.cfg = cfg
        self.slices = _group_slices(cfg.channels)
        self.branch_layers: list[list[Conv3d]] = []
        for _ in range(cfg.branches):
            dims = [cfg.in_channels] + [cfg.width] * (cfg.depth - 1) + [cfg.out_channels]
            self.branch_layers.append(
                [Conv3d(dims[i], dims[i + 1], (3, 3, 3), rng) for i in range(cfg.depth)]
            )

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for k, layers in enumerate(self.branch_layers):
            for i, conv in enumerate(layers):
                for name, p in conv.params().items():
                    out[f"branch.{k}.conv.{i}.{name}"] = p
        return out

    def _run_branch(self, k: int, f: Tensor) -> Tensor:
        h = f
        for conv in self.branch_layers[k][:-1]:
            h = T.relu(conv(h))
        out = self.branch_layers[k][-1](h)
        if "normals" in self.slices:
            parts = []
            for name, _ in self.cfg.channels:
                sl = self.slices[name]
                part = T.slice_axis(out, sl.start, sl.stop, axis=-1)
                if name == "normals":
                    part = renormalize(part)
                parts.append(part)
            out = T.concat(parts, axis=-1)
        return out

    def decode_graph(self, f: Tensor) -> tuple[list[Tensor], Tensor]:
        """f: (B, frames, H, W, in_channels) -> (branch outputs, exact mean)."""
        outs = [self._run_branch(k, f) for k in range(self.cfg.branches)]
        acc = outs[0]
        for o in outs[1:]:
            acc = acc + o
        ens = acc * (1.0 / self.cfg.branches)
        return outs, ens

    def decode(self, features: np.ndarray) -> dict:
        """Numpy-in/numpy-out decode of one tap (frames, H, W, Cin)."""
        batched = features.ndim == 5
        f = features if batched else features[None]
        with no_grad():
            outs, ens = self.decode_graph(Tensor(np.asarray(f, dtype=np.float32)))
        squeeze = (lambda a: a) if batched else (lambda a: a[0])
        return {
            "branches": [squeeze(o.data) for o in outs],
            "ensemble": squeeze(ens.data),
        }


# -- loss terms -------------------------------------------------------------------


def _sobel_kernel(channels: int) -> np.ndarray:
    gx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float32)
    gy = gx.T
    w = np.zeros((1, 3, 3, channels, 2 * channels), dtype=np.float32)
    for c in range(channels):
        w[0, :, :, c, 2 * c] = gx
        w[0, :, :, c, 2 * c + 1] = gy
    return w


def sobel_magnitude_graph(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Per-channel, per-frame Sobel gradient magnitude (zero-padded borders)."""
    c = x.shape[-1]
    w = Tensor(_sobel_kernel(c))
    b = Tensor(np.zeros(2 * c, dtype=np.float32))
    g = T.conv3d(x, w, b)
    gx = T.slice_axis(
        T.reshape(g, g.shape[:-1] + (c, 2)), 0, 1, axis=-1
    )
    gy = T.slice_axis(
        T.reshape(g, g.shape[:-1] + (c, 2)), 1, 2, axis=-1
    )
    return T.sqrt(gx * gx + gy * gy + eps)


def branch_loss(pred: Tensor, gt: np.ndarray, channels: tuple[tuple[str, int], ...], cfg: LossConfig) -> Tensor:
    """Sum over channel groups of L1 / cosine terms plus the edge-gradient term."""
    slices = _group_slices(channels)
    gt = np.asarray(gt, dtype=np.float32)
    total = None
    for name, _ in channels:
        sl = slices[name]
        p = T.slice_axis(pred, sl.start, sl.stop, axis=-1)
        g = gt[..., sl]
        if CHANNEL_KIND[name] == "cosine":
            term = cosine_distance(p, Tensor(g))
        else:
            term = T.reduce_mean(T.absolute(p - g))
            if cfg.lambda_edge > 0:
                edge = T.reduce_mean(
                    T.absolute(sobel_magnitude_graph(p) - sobel_magnitude_graph(Tensor(g)))
                )
                term = term + cfg.lambda_edge * edge
        total = term if total is None else total + term
    return total


def ensemble_loss(ens: Tensor, gt: np.ndarray, channels: tuple[tuple[str, int], ...]) -> Tensor:
    """MSE over every non-normal channel plus a cosine term on normals."""
    slices = _group_slices(channels)
    gt = np.asarray(gt, dtype=np.float32)
    non_normal = [name for name, _ in channels if CHANNEL_KIND[name] != "cosine"]
    total = None
    if non_normal:
        cols = [slices[n] for n in non_normal]
        preds = T.concat([T.slice_axis(ens, c.start, c.stop, axis=-1) for c in cols], axis=-1)
        gts = np.concatenate([gt[..., c] for c in cols], axis=-1)
        diff = preds - gts
        total = T.reduce_mean(diff * diff)
    for name, _ in channels:
        if CHANNEL_KIND[name] == "cosine":
            sl = slices[name]
            term = cosine_distance(T.slice_axis(ens, sl.start, sl.stop, axis=-1), Tensor(gt[..., sl]))
            total = term if total is None else total + term
    return total


def total_loss(
    branch_outs: list[Tensor], ens: Tensor, gt: np.ndarray, channels: tuple[tuple[str, int], ...], cfg: LossConfig
) -> Tensor:
    """lambda_ens * ensemble term + sum of branch losses."""
    loss = None
    for out in branch_outs:
        term = branch_loss(out, gt, channels, cfg)
        loss = term if loss is None else loss + term
    if cfg.lambda_ens > 0:
        if cfg.ensemble_form == "mean":
            e = ensemble_loss(ens, gt, channels)
        elif cfg.ensemble_form == "per_branch":
            e = None
            for out in branch_outs:
                gtt = np.asarray(gt, dtype=np.float32)
                diff = out - gtt
                term = T.reduce_mean(diff * diff)
                e = term if e is None else e + term
            e = e * (1.0 / len(branch_outs))
        else:
            raise ValueError(f"unknown ensemble_form {cfg.ensemble_form!r}")
        loss = loss + cfg.lambda_ens * e
    return loss


# -- training over cached feature/target pairs -------------------------------------


def train_decoder(
    decoder: MBDecoder,
    features: np.ndarray,
    targets: np.ndarray,
    cfg: LossConfig,
    steps: int,
    lr: float,
    seed: int,
    batch: int = 4,
) -> list[float]:
    """Supervised decoder training on cached (tap, ground-truth stack) pairs."""
    if len(features) == 0:
        raise ValueError("empty feature dataset")
    params = list(decoder.params().values())
    opt = Adam(params, lr=lr)
    rng = stream(seed, "data")
    losses: list[float] = []
    for step in range(steps):
        idx = rng.integers(0, len(features), size=batch)
        f = Tensor(features[idx])
        outs, ens = decoder.decode_graph(f)
        loss = total_loss(outs, ens, targets[idx], decoder.cfg.channels, cfg)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(f"decoder loss became {value} at step {step}")
        losses.append(value)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return losses


def eval_decoder_l1(decoder: MBDecoder, features: np.ndarray, targets: np.ndarray) -> dict[str, float]:
    """Held-out per-channel ensemble L1 (cosine distance for normals)."""
    out = decoder.decode(features)
    ens = out["ensemble"]
    slices = _group_slices(decoder.cfg.channels)
    report = {}
    for name, _ in decoder.cfg.channels:
        sl = slices[name]
        if CHANNEL_KIND[name] == "cosine":
            p, g = ens[..., sl], targets[..., sl]
            dot = (p * g).sum(-1)
            denom = np.linalg.norm(p, axis=-1) * np.linalg.norm(g, axis=-1) + 1e-8
            report[name] = float(np.mean(1.0 - dot / denom))
        else:
            report[name] = float(np.mean(np.abs(ens[..., sl] - targets[..., sl])))
    return report


# -- toy heads over the dot model ----------------------------------------------------


@dataclass
class ToyLossConfig:
    lambda_ens: float = 0.25
    ensemble_form: str = "per_branch"


def train_toy_mb(
    teacher: DiffusionModel,
    videos: list[np.ndarray],
    K: int,
    steps: int,
    lr: float,
    seed: int,
    batch: int = 8,
    tap_block: int | None = None,
    width: int = 64,
    depth: int = 4,
    loss_cfg: ToyLossConfig | None = None,
) -> tuple[MBDecoder, list[float]]:
    """Heads from pure-noise features at the top step to clean-video hypotheses.

    Branch loss is the dataset-minimum L1 (tractable: the dot datasets have 3
    or 9 elements); the ensemble term follows `loss_cfg.ensemble_form`.
    """
    loss_cfg = loss_cfg or ToyLossConfig()
    b = tap_block if tap_block is not None else teacher.cfg.n_blocks - 2
    dec_cfg = DecoderConfig(
        in_channels=teacher.cfg.dim, branches=K, width=width, depth=depth, channels=TOY_CHANNELS
    )
    decoder = MBDecoder(dec_cfg, seed=seed)
    data = np.stack(videos).astype(np.float32)  # (M, F, H, W, 1)
    m = len(videos)
    params = list(decoder.params().values())
    opt = Adam(params, lr=lr)
    data_rng = stream(seed, "data")
    noise_rng = stream(seed, "noise")
    t_top = teacher.schedule.T
    losses: list[float] = []
    dataset_b = data[None]  # (1, M, F, H, W, 1)
    for step in range(steps):
        x_t = noise_rng.standard_normal((batch,) + data.shape[1:]).astype(np.float32)
        _, feats = teacher.predict_eps(x_t, t_top, taps=[b])
        f = Tensor(feats[b])
        outs, ens = decoder.decode_graph(f)
        x0_pair = data[data_rng.integers(0, m, size=batch)]
        loss = None
        for out in outs:
            expanded = T.reshape(out, (batch, 1) + out.shape[1:])
            diffs = T.absolute(expanded - dataset_b)
            per_pair = T.reduce_mean(diffs, axis=(2, 3, 4, 5))  # (B, M)
            term = T.reduce_mean(T.reduce_min(per_pair, axis=1))
            loss = term if loss is None else loss + term
        if loss_cfg.lambda_ens > 0:
            if loss_cfg.ensemble_form == "per_branch":
                e = None
                for out in outs:
                    diff = out - x0_pair
                    t2 = T.reduce_mean(diff * diff)
                    e = t2 if e is None else e + t2
                e = e * (1.0 / K)
            else:
                diff = ens - x0_pair
                e = T.reduce_mean(diff * diff)
            loss = loss + loss_cfg.lambda_ens * e
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(f"toy decoder loss became {value} at step {step}")
        losses.append(value)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return decoder, losses


def toy_mb_branch_samples(
    teacher: DiffusionModel, decoder: MBDecoder, seed: int, count: int, tap_block: int | None = None
) -> np.ndarray:
    """1-NFE branch hypotheses from pure noise: (count, K, F, H, W, 1)."""
    b = tap_block if tap_block is not None else teacher.cfg.n_blocks - 2
    c = teacher.cfg
    x = np.stack(
        [stream(seed, "sampler", i, 0).standard_normal((c.frames, c.height, c.width, c.channels)).astype(np.float32) for i in range(count)]
    )
    _, feats = teacher.predict_eps(x, teacher.schedule.T, taps=[b])
    out = decoder.decode(feats[b])
    return np.stack(out["branches"], axis=1)


# -- checkpoints -----------------------------------------------------------------------


def save_decoder(path: str | Path, decoder: MBDecoder, extra: dict | None = None) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {"kind": "decoder", "config": decoder.cfg.to_json()}
    if extra:
        meta.update(extra)
    (root / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for key, arr in decoder.state().items():
        blob.save(root / (key.replace("/", "_") + ".dbtn"), arr)


def load_decoder(path: str | Path) -> MBDecoder:
    root = Path(path)
    meta = json.loads((root / "model.json").read_text())
    cfg = DecoderConfig.from_json(meta["config"])
    decoder = MBDecoder(cfg, seed=0)
    state = {key: blob.load(root / (key.replace("/", "_") + ".dbtn")) for key in decoder.params()}
    decoder.load_state(state)
    return decoder
