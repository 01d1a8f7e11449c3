"""Tiny video diffusion transformer with adaptive-layernorm timestep injection.

Every pixel of every frame is one token (patch size 1), so features tapped
after any block reshape losslessly to (frames, H, W, model_dim). The final
head predicts the injected noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Linear, Module, sinusoidal_embedding
from .rng import stream
from .tensor import Tensor


@dataclass(frozen=True)
class DiTConfig:
    frames: int
    height: int
    width: int
    channels: int
    dim: int = 64
    n_blocks: int = 4
    heads: int = 4
    mlp_ratio: int = 2

    @property
    def tokens(self) -> int:
        return self.frames * self.height * self.width

    def to_json(self) -> dict:
        return {
            "frames": self.frames,
            "height": self.height,
            "width": self.width,
            "channels": self.channels,
            "dim": self.dim,
            "n_blocks": self.n_blocks,
            "heads": self.heads,
            "mlp_ratio": self.mlp_ratio,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DiTConfig":
        return cls(**d)


class DiTBlock(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.heads = heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng)
        # adaLN-zero: gates start at zero so each block begins as identity
        self.ada = Linear(dim, 6 * dim, rng, zero_init=True)
        self._ones = Tensor(np.ones(dim, dtype=np.float32))
        self._zeros = Tensor(np.zeros(dim, dtype=np.float32))

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        d = x.shape[-1]
        mods = self.ada(cond)  # (B, 6D)
        b = mods.shape[0]
        parts = [
            T.reshape(T.slice_axis(mods, i * d, (i + 1) * d, axis=-1), (b, 1, d))
            for i in range(6)
        ]
        shift1, scale1, gate1, shift2, scale2, gate2 = parts
        h = T.layernorm(x, self._ones, self._zeros)
        h = h * (scale1 + 1.0) + shift1
        att = T.softmax_attention(self.wq(h), self.wk(h), self.wv(h), self.heads)
        x = x + gate1 * self.wo(att)
        h = T.layernorm(x, self._ones, self._zeros)
        h = h * (scale2 + 1.0) + shift2
        x = x + gate2 * self.fc2(T.gelu(self.fc1(h)))
        return x


class DiT(Module):
    """Noise predictor over token grids, with feature taps and overrides.

    ``taps`` collects post-block residual-stream activations; ``override``
    replaces the activations right after the given block before the remaining
    blocks run (the latent-steering injection site).
    """

    def __init__(self, cfg: DiTConfig, seed: int):
        rng = stream(seed, "init")
        self.cfg = cfg
        d = cfg.dim
        self.patch = Linear(cfg.channels, d, rng)
        self.pos = Tensor(
            (rng.standard_normal((cfg.tokens, d)) * 0.02).astype(np.float32),
            requires_grad=True,
        )
        self.t_fc1 = Linear(d, d, rng)
        self.t_fc2 = Linear(d, d, rng)
        self.blocks = [DiTBlock(d, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.n_blocks)]
        self.final_ada = Linear(d, 2 * d, rng, zero_init=True)
        self.head = Linear(d, cfg.channels, rng, zero_init=True)
        self._ones = Tensor(np.ones(d, dtype=np.float32))
        self._zeros = Tensor(np.zeros(d, dtype=np.float32))

    def cond_embedding(self, t_idx: np.ndarray) -> Tensor:
        emb = Tensor(sinusoidal_embedding(np.atleast_1d(t_idx), self.cfg.dim))
        return self.t_fc2(T.gelu(self.t_fc1(emb)))

    def __call__(
        self,
        x_tokens: Tensor,
        t_idx: np.ndarray,
        taps: list[int] | None = None,
        override: tuple[int, Tensor] | None = None,
    ) -> tuple[Tensor, dict[int, Tensor]]:
        cfg = self.cfg
        cond = self.cond_embedding(t_idx)
        x = self.patch(x_tokens) + self.pos
        captured: dict[int, Tensor] = {}
        for i, block in enumerate(self.blocks):
            if override is not None and override[0] == i:
                x = override[1]
            else:
                x = block(x, cond)
            if taps is not None and i in taps:
                captured[i] = x
        d = cfg.dim
        mods = self.final_ada(cond)
        b = mods.shape[0]
        shift = T.reshape(T.slice_axis(mods, 0, d, axis=-1), (b, 1, d))
        scale = T.reshape(T.slice_axis(mods, d, 2 * d, axis=-1), (b, 1, d))
        h = T.layernorm(x, self._ones, self._zeros)
        h = h * (scale + 1.0) + shift
        return self.head(h), captured

    # -- token helpers ------------------------------------------------------

    def to_tokens(self, video_batch: np.ndarray | Tensor) -> Tensor:
        cfg = self.cfg
        if isinstance(video_batch, Tensor):
            return T.reshape(video_batch, (video_batch.shape[0], cfg.tokens, cfg.channels))
        arr = np.asarray(video_batch, dtype=np.float32)
        return Tensor(arr.reshape(arr.shape[0], cfg.tokens, cfg.channels))

    def to_video(self, tokens: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        return tokens.reshape(tokens.shape[0], cfg.frames, cfg.height, cfg.width, cfg.channels)

    def features_to_grid(self, feats: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        return feats.reshape(feats.shape[0], cfg.frames, cfg.height, cfg.width, cfg.dim)

    def grid_to_tokens(self, grid: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        return grid.reshape(grid.shape[0], cfg.tokens, cfg.dim)
