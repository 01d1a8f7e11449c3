"""Independent reference implementations used as test oracles.

Everything here is float64 numpy with naive loops or closed forms, written
separately from the engine so gradient checks and behavioral tests never
share code with the paths they verify.
"""

from __future__ import annotations

import math

import numpy as np


def fd_gradient(loss_fn, arrays: list[np.ndarray], idx: int, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of a float64 scalar loss wrt arrays[idx]."""
    work = [a.astype(np.float64).copy() for a in arrays]
    x = work[idx]
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = loss_fn(*work)
        flat[i] = orig - h
        lm = loss_fn(*work)
        flat[i] = orig
        gflat[i] = (lp - lm) / (2.0 * h)
    return grad


def max_rel_err(autodiff_grad: np.ndarray, numeric_grad: np.ndarray, floor: float = 1e-2) -> float:
    denom = np.maximum(np.abs(numeric_grad), floor)
    return float(np.max(np.abs(autodiff_grad.astype(np.float64) - numeric_grad) / denom))


# -- float64 reference forwards -------------------------------------------------


def ref_gelu(x):
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


def ref_layernorm(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def ref_softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def ref_attention(q, k, v, heads):
    """Per-head loop attention for 2-D (tokens, dim) inputs."""
    n, d = q.shape
    dh = d // heads
    dvh = v.shape[-1] // heads
    out = np.zeros((n, v.shape[-1]))
    for h in range(heads):
        qs = q[:, h * dh : (h + 1) * dh]
        ks = k[:, h * dh : (h + 1) * dh]
        vs = v[:, h * dvh : (h + 1) * dvh]
        att = ref_softmax(qs @ ks.T / math.sqrt(dh), axis=-1)
        out[:, h * dvh : (h + 1) * dvh] = att @ vs
    return out


def ref_conv3d(x, w, b):
    kd, kh, kw, cin, cout = w.shape
    n, f, hh, ww, _ = x.shape
    pd, ph, pw = kd // 2, kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw), (0, 0)))
    y = np.zeros((n, f, hh, ww, cout))
    for i in range(kd):
        for j in range(kh):
            for l in range(kw):
                patch = xp[:, i : i + f, j : j + hh, l : l + ww, :]
                y += np.einsum("nfhwc,co->nfhwo", patch, w[i, j, l])
    return y + b


def label_components_4(mask: np.ndarray) -> int:
    """scipy-based connected-component count; the flood-fill oracle."""
    from scipy import ndimage

    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    _, n = ndimage.label(mask, structure=structure)
    return int(n)


def posterior_mean_eps(x_t: np.ndarray, sigma: float, dataset: np.ndarray) -> np.ndarray:
    """Exact E[eps | x_t] for a finite dataset under x_t = (1-s) x0 + s eps.

    log p(x0_j | x_t) up to const = -||x_t - (1-s) x0_j||^2 / (2 s^2).
    """
    flat = x_t.reshape(x_t.shape[0], -1).astype(np.float64)
    ds = dataset.reshape(dataset.shape[0], -1).astype(np.float64)
    d2 = ((flat[:, None, :] - (1.0 - sigma) * ds[None, :, :]) ** 2).sum(axis=2)
    logw = -d2 / (2.0 * sigma * sigma)
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=1, keepdims=True)
    x0_mean = w @ ds
    eps = (flat - (1.0 - sigma) * x0_mean) / sigma
    return eps.reshape(x_t.shape).astype(np.float32)


class OracleDotModel:
    """Drop-in denoiser computing the exact posterior-mean eps for a dot dataset.

    Exposes the subset of the DiffusionModel surface the samplers touch.
    """

    def __init__(self, videos, schedule):
        self.dataset = np.stack(videos).astype(np.float32)
        self.schedule = schedule
        f, h, w, c = self.dataset.shape[1:]

        class _Cfg:
            frames, height, width, channels = f, h, w, c

        self.cfg = _Cfg()

    def sample_shape(self, batch):
        return (batch,) + self.dataset.shape[1:]

    def predict_eps(self, x_batch, t_idx, taps=None, override=None):
        sigma = float(self.schedule.sigma[int(t_idx)])
        return posterior_mean_eps(x_batch, sigma, self.dataset), {}
