"""Consistency distillation of a trained noise predictor into a one-step model.

The student maps (x_t, t) straight to a clean estimate through the skip
parameterization g(x, t) = (1 - sigma_t) x + sigma_t F(x, t), which enforces
the boundary condition g(x, 0) = x exactly and stays finite at sigma = 1
(where g reduces to the raw network output). Training matches the student at
a high step against an EMA copy of itself at the adjacent lower step reached
by one deterministic teacher step, with an L1 consistency metric.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np

from . import blob
from . import tensor as T
from .diffusion import DiffusionModel, DivergenceError, NoiseSchedule, _x0_from_eps
from .dit import DiT, DiTConfig
from .nn import l1
from .optim import Adam
from .rng import stream
from .tensor import Tensor, no_grad


class ConsistencyModel:
    """One-step clean-sample predictor distilled from a diffusion model."""

    def __init__(self, cfg: DiTConfig, schedule: NoiseSchedule, net: DiT):
        self.cfg = cfg
        self.schedule = schedule
        self.net = net

    def clean_estimate_graph(self, x_batch: np.ndarray, t_idx: np.ndarray) -> Tensor:
        sigma = self.schedule.sigma[np.asarray(t_idx)].astype(np.float32)
        out, _ = self.net(self.net.to_tokens(x_batch), np.asarray(t_idx))
        flat = x_batch.reshape(x_batch.shape[0], self.cfg.tokens, self.cfg.channels)
        skip = Tensor((1.0 - sigma)[:, None, None] * flat)
        return skip + Tensor(sigma[:, None, None]) * out

    def clean_estimate(self, x_batch: np.ndarray, t_idx) -> np.ndarray:
        t_arr = np.full(x_batch.shape[0], t_idx) if np.isscalar(t_idx) else np.asarray(t_idx)
        with no_grad():
            g = self.clean_estimate_graph(x_batch, t_arr)
        return self.net.to_video(g.data)


def distill_consistency(
    teacher: DiffusionModel,
    videos: list[np.ndarray],
    steps: int,
    lr: float,
    seed: int,
    batch: int = 8,
    ema_rate: float = 0.999,
    n_discretization: int = 50,
) -> tuple[ConsistencyModel, list[float]]:
    """Distill `teacher` into a 1-NFE student. Returns (student, loss curve)."""
    if not videos:
        raise ValueError("empty dataset")
    sched = teacher.schedule
    sub = sorted({round(sched.T * j / n_discretization) for j in range(n_discretization + 1)})
    data = np.stack(videos).astype(np.float32)
    student_net = DiT(teacher.cfg, seed=0)
    student_net.load_state(teacher.net.state())
    student = ConsistencyModel(teacher.cfg, sched, student_net)
    ema_net = DiT(teacher.cfg, seed=0)
    ema_net.load_state(teacher.net.state())
    ema = ConsistencyModel(teacher.cfg, sched, ema_net)

    student_params = student.net.params()
    ema_params = ema.net.params()
    opt = Adam(list(student_params.values()), lr=lr)
    data_rng = stream(seed, "data")
    noise_rng = stream(seed, "noise")
    losses: list[float] = []
    for step in range(steps):
        idx = data_rng.integers(0, len(videos), size=batch)
        x0 = data[idx]
        j = noise_rng.integers(0, len(sub) - 1, size=batch)
        t_hi = np.array([sub[k + 1] for k in j])
        t_lo = np.array([sub[k] for k in j])
        s_hi = sched.sigma[t_hi].astype(np.float32)[:, None, None, None, None]
        eps = noise_rng.standard_normal(x0.shape).astype(np.float32)
        x_hi = (1.0 - s_hi) * x0 + s_hi * eps

        # one deterministic teacher step down to t_lo
        t_eval = np.minimum(t_hi, sched.T - 1)
        eps_hat, _ = teacher.predict_eps(x_hi, t_eval)
        s_eval = sched.sigma[t_eval].astype(np.float32)[:, None, None, None, None]
        x0_hat = ((x_hi - s_eval * eps_hat) / (1.0 - s_eval)).astype(np.float32)
        s_lo = sched.sigma[t_lo].astype(np.float32)[:, None, None, None, None]
        x_lo = ((1.0 - s_lo) * x0_hat + s_lo * eps_hat).astype(np.float32)

        target = ema.clean_estimate(x_lo, t_lo)
        pred = student.clean_estimate_graph(x_hi, t_hi)
        loss = l1(pred, Tensor(target.reshape(batch, teacher.cfg.tokens, teacher.cfg.channels)))
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(f"distillation loss became {value} at step {step}")
        losses.append(value)
        opt.zero_grad()
        loss.backward()
        opt.step()
        for key, p in ema_params.items():
            p.data *= ema_rate
            p.data += (1.0 - ema_rate) * student_params[key].data
    return student, losses


def sample_onestep(model: ConsistencyModel, seed: int, count: int = 1) -> np.ndarray:
    """1-NFE generation: clean estimate of pure noise at the top step."""
    c = model.cfg
    x = np.stack(
        [stream(seed, "sampler", i, 0).standard_normal((c.frames, c.height, c.width, c.channels)).astype(np.float32) for i in range(count)]
    )
    return model.clean_estimate(x, model.schedule.T)


def save_consistency(path: str | Path, model: ConsistencyModel) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "kind": "consistency",
        "config": model.cfg.to_json(),
        "schedule": {"T": model.schedule.T, "sigma": [float(s) for s in model.schedule.sigma]},
    }
    (root / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for key, arr in model.net.state().items():
        blob.save(root / (key.replace("/", "_") + ".dbtn"), arr)


def load_consistency(path: str | Path) -> ConsistencyModel:
    root = Path(path)
    meta = json.loads((root / "model.json").read_text())
    cfg = DiTConfig.from_json(meta["config"])
    sched = NoiseSchedule(T=meta["schedule"]["T"], sigma=np.asarray(meta["schedule"]["sigma"]))
    net = DiT(cfg, seed=0)
    state = {key: blob.load(root / (key.replace("/", "_") + ".dbtn")) for key in net.params()}
    net.load_state(state)
    return ConsistencyModel(cfg, sched, net)
