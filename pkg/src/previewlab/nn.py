"""Small layer library on top of the tensor engine.

Layers hold their parameters as Tensors in a flat dict keyed by path
("blocks.0.attn.wq", ...), which is also the checkpoint key space.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameter container with path-keyed traversal."""

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                for k, v in val.params().items():
                    out[f"{name}.{k}"] = v
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        for k, v in item.params().items():
                            out[f"{name}.{i}.{k}"] = v
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.params().values())

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = self.params()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ValueError(f"state mismatch; missing={sorted(missing)} extra={sorted(extra)}")
        for k, p in own.items():
            if p.data.shape != state[k].shape:
                raise ValueError(f"shape mismatch for {k}: {p.data.shape} vs {state[k].shape}")
            p.data = state[k].astype(np.float32).copy()

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params().items()}


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, zero_init: bool = False):
        if zero_init:
            w = np.zeros((din, dout), dtype=np.float32)
        else:
            scale = 1.0 / np.sqrt(din)
            w = rng.uniform(-scale, scale, size=(din, dout)).astype(np.float32)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(dout, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.affine(x, self.w, self.b)


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, kernel: tuple[int, int, int], rng: np.random.Generator):
        kd, kh, kw = kernel
        fan_in = kd * kh * kw * cin
        scale = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-scale, scale, size=(kd, kh, kw, cin, cout)).astype(np.float32)
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv3d(x, self.w, self.b)


def sinusoidal_embedding(steps: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Classic transformer timestep embedding for integer step indices."""
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = np.asarray(steps, dtype=np.float64)[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=-1)
    return emb.astype(np.float32)


def l1(pred: Tensor, target) -> Tensor:
    return T.reduce_mean(T.absolute(pred - target))


def mse(pred: Tensor, target) -> Tensor:
    diff = pred - target
    return T.reduce_mean(diff * diff)


def cosine_distance(pred: Tensor, target, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """Mean of 1 - cos(pred, target) along `axis`; 0 aligned, 1 orthogonal, 2 antipodal."""
    dot = T.reduce_sum(pred * target, axis=axis)
    na = T.sqrt(T.reduce_sum(pred * pred, axis=axis) + eps)
    nb = T.sqrt(T.reduce_sum(target * target, axis=axis) + eps)
    return T.reduce_mean(1.0 - dot / (na * nb))


def renormalize(vecs: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    norm = T.sqrt(T.reduce_sum(vecs * vecs, axis=axis, keepdims=True) + eps)
    return vecs / norm
