"""Noise schedule, forward noising, samplers, training, and feature taps.

The noising process is the linear interpolation x_t = (1 - sigma_t) x0 +
sigma_t eps with sigma_0 = 0 and sigma_T = 1. The network predicts eps, so
the clean estimate is recovered algebraically; that estimate is singular at
sigma = 1, which is why samplers evaluate the model no later than index
T - 1 (the state itself still starts at exact pure noise).

Both samplers share one step form: jump to the predicted-endpoint
interpolation at the next sigma. The ancestral sampler re-noises with fresh
stream noise; the ODE sampler reuses the predicted noise, making it a
deterministic Euler integration of the probability-flow field.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import blob
from . import tensor as T
from .dit import DiT, DiTConfig
from .nn import mse
from .optim import Adam
from .rng import stream
from .tensor import Tensor, no_grad


class DivergenceError(RuntimeError):
    """Raised when a training loss goes non-finite."""


@dataclass
class NoiseSchedule:
    T: int
    sigma: np.ndarray  # (T+1,), sigma[0] = 0, sigma[T] = 1, strictly increasing

    @classmethod
    def linear(cls, T: int) -> "NoiseSchedule":
        return cls(T=T, sigma=(np.arange(T + 1) / T).astype(np.float64))

    def __post_init__(self):
        s = np.asarray(self.sigma, dtype=np.float64)
        if len(s) != self.T + 1 or s[0] != 0.0 or s[-1] != 1.0 or np.any(np.diff(s) <= 0):
            raise ValueError("schedule must rise strictly from exactly 0 to exactly 1")
        self.sigma = s

    def check_step(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.T:
            raise ValueError(f"step index {t} outside [0, {self.T}]")
        return t


@dataclass
class LatentState:
    """A (possibly noisy) sample pinned to a schedule position."""

    x: np.ndarray  # (frames, H, W, C)
    step_index: int
    schedule: NoiseSchedule

    def __post_init__(self):
        self.step_index = self.schedule.check_step(self.step_index)

    @property
    def sigma(self) -> float:
        return float(self.schedule.sigma[self.step_index])


@dataclass
class FeatureTap:
    """Post-block residual activations for one forward pass."""

    block_index: int
    step_index: int
    features: np.ndarray  # (frames, H, W, model_dim)


class DiffusionModel:
    """A DiT bound to a noise schedule and a sample geometry."""

    def __init__(self, cfg: DiTConfig, schedule: NoiseSchedule, seed: int = 0, net: DiT | None = None):
        self.cfg = cfg
        self.schedule = schedule
        self.net = net if net is not None else DiT(cfg, seed)

    # -- forward -----------------------------------------------------------

    def predict_eps(
        self,
        x_batch: np.ndarray,
        t_idx: int | np.ndarray,
        taps: list[int] | None = None,
        override: tuple[int, Tensor] | None = None,
    ) -> tuple[np.ndarray, dict[int, np.ndarray]]:
        """Batched eps prediction without graph construction."""
        t_arr = np.full(x_batch.shape[0], t_idx) if np.isscalar(t_idx) else np.asarray(t_idx)
        with no_grad():
            out, captured = self.net(self.net.to_tokens(x_batch), t_arr, taps=taps, override=override)
        feats = {b: self.net.features_to_grid(v.data) for b, v in captured.items()}
        return self.net.to_video(out.data), feats

    def sample_shape(self, batch: int) -> tuple[int, ...]:
        c = self.cfg
        return (batch, c.frames, c.height, c.width, c.channels)


def forward_noise(
    x0: np.ndarray, step_index: int, schedule: NoiseSchedule, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """x_t = (1 - sigma_t) x0 + sigma_t eps. Returns (x_t, eps)."""
    t = schedule.check_step(step_index)
    sigma = schedule.sigma[t]
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    x_t = ((1.0 - sigma) * x0 + sigma * eps).astype(np.float32)
    return x_t, eps


def predict_x0(model: DiffusionModel, state: LatentState) -> np.ndarray:
    """Tweedie-style clean estimate; rejected at sigma = 1 where it is singular."""
    t = model.schedule.check_step(state.step_index)
    sigma = model.schedule.sigma[t]
    if sigma >= 1.0:
        raise ValueError("x0 prediction is singular at sigma = 1")
    eps_hat, _ = model.predict_eps(state.x[None], t)
    return _x0_from_eps(state.x.astype(np.float32), eps_hat[0], sigma)


def _x0_from_eps(x: np.ndarray, eps_hat: np.ndarray, sigma: float) -> np.ndarray:
    return ((x - sigma * eps_hat) / (1.0 - sigma)).astype(np.float32)


def step_grid(from_step: int, to_step: int, n_steps: int) -> list[int]:
    """Descending schedule indices from from_step to to_step in n_steps jumps."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    span = from_step - to_step
    if span <= 0:
        raise ValueError(f"cannot step from {from_step} down to {to_step}")
    grid = [to_step + round(span * i / n_steps) for i in range(n_steps, 0, -1)] + [to_step]
    out = [grid[0]]
    for g in grid[1:]:
        if g < out[-1]:
            out.append(g)
    return out


def run_sampler(
    model: DiffusionModel,
    x: np.ndarray,
    grid: list[int],
    mode: str,
    seed: int,
    sample_ids: list[int] | None = None,
    override: tuple[int, np.ndarray] | None = None,
    override_window: int = 1,
    capture_x0: bool = False,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Advance a batch along a descending step grid.

    mode "ancestral": x' = (1-s') x0_hat + s' eps_fresh, one noise sub-stream
    per sample id. mode "ode": x' = (1-s') x0_hat + s' eps_hat (deterministic).
    ``override`` injects steered features at the configured block for the
    first ``override_window`` evaluations.
    """
    if mode not in ("ancestral", "ode"):
        raise ValueError(f"unknown sampler mode {mode!r}")
    sched = model.schedule
    batch = x.shape[0]
    ids = sample_ids if sample_ids is not None else list(range(batch))
    gens = [stream(seed, "sampler", i) for i in ids] if mode == "ancestral" else None
    x = np.asarray(x, dtype=np.float32)
    x0_trace: list[np.ndarray] = []
    for step_no in range(len(grid) - 1):
        t, t_next = grid[step_no], grid[step_no + 1]
        t_eval = min(t, sched.T - 1)
        sigma_eval = sched.sigma[t_eval]
        ov = None
        if override is not None and step_no < override_window:
            ov = (override[0], Tensor(np.broadcast_to(override[1], (batch,) + override[1].shape[-2:]).copy()))
        eps_hat, _ = model.predict_eps(x, t_eval, override=ov)
        x0_hat = _x0_from_eps(x, eps_hat, sigma_eval)
        if capture_x0:
            x0_trace.append(x0_hat.copy())
        sigma_next = sched.sigma[t_next]
        if mode == "ode":
            x = ((1.0 - sigma_next) * x0_hat + sigma_next * eps_hat).astype(np.float32)
        else:
            eps_new = np.stack([g.standard_normal(x.shape[1:]).astype(np.float32) for g in gens])
            x = ((1.0 - sigma_next) * x0_hat + sigma_next * eps_new).astype(np.float32)
    return x, x0_trace


def sample_ancestral(
    model: DiffusionModel, n_steps: int, seed: int, count: int = 1, capture_x0: bool = False
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Full trajectories from pure noise; returns (samples, optional x0 previews)."""
    shape = model.sample_shape(count)
    x = np.stack(
        [stream(seed, "sampler", i, 0).standard_normal(shape[1:]).astype(np.float32) for i in range(count)]
    )
    grid = step_grid(model.schedule.T, 0, n_steps)
    return run_sampler(model, x, grid, "ancestral", seed, capture_x0=capture_x0)


def sample_ode(
    model: DiffusionModel, n_steps: int, seed: int, count: int = 1, capture_x0: bool = False
) -> tuple[np.ndarray, list[np.ndarray]]:
    shape = model.sample_shape(count)
    x = np.stack(
        [stream(seed, "sampler", i, 0).standard_normal(shape[1:]).astype(np.float32) for i in range(count)]
    )
    grid = step_grid(model.schedule.T, 0, n_steps)
    return run_sampler(model, x, grid, "ode", seed, capture_x0=capture_x0)


def tap_features(model: DiffusionModel, state: LatentState, block_index: int) -> FeatureTap:
    """Post-block activations for the state's forward pass; pure read."""
    if not 0 <= block_index < model.cfg.n_blocks:
        raise ValueError(f"block {block_index} outside [0, {model.cfg.n_blocks})")
    t_eval = min(state.step_index, model.schedule.T - 1)
    _, feats = model.predict_eps(state.x[None], t_eval, taps=[block_index])
    return FeatureTap(block_index=block_index, step_index=state.step_index, features=feats[block_index][0])


# -- training ---------------------------------------------------------------------


def train_diffusion(
    model: DiffusionModel,
    videos: list[np.ndarray],
    steps: int,
    lr: float,
    seed: int,
    batch: int = 8,
    log_every: int = 50,
) -> list[float]:
    """Standard eps-matching MSE at uniformly sampled timesteps."""
    if not videos:
        raise ValueError("empty dataset")
    data = np.stack(videos).astype(np.float32)
    n = len(videos)
    params = list(model.net.params().values())
    opt = Adam(params, lr=lr)
    data_rng = stream(seed, "data")
    noise_rng = stream(seed, "noise")
    losses: list[float] = []
    for step in range(steps):
        idx = data_rng.integers(0, n, size=batch)
        x0 = data[idx]
        t = noise_rng.integers(1, model.schedule.T + 1, size=batch)
        sigma = model.schedule.sigma[t].astype(np.float32)[:, None, None, None, None]
        eps = noise_rng.standard_normal(x0.shape).astype(np.float32)
        x_t = (1.0 - sigma) * x0 + sigma * eps
        pred, _ = model.net(model.net.to_tokens(x_t), t)
        target = Tensor(eps.reshape(batch, model.cfg.tokens, model.cfg.channels))
        loss = mse(pred, target)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(f"training loss became {value} at step {step} (lr={lr}, batch={batch})")
        losses.append(value)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return losses


def eval_eps_loss(model: DiffusionModel, videos: list[np.ndarray], seed: int, draws: int = 64) -> float:
    """Monte-Carlo eps-MSE of the model on a dataset (fixed stream)."""
    rng = stream(seed, "evalloss")
    data = np.stack(videos).astype(np.float32)
    idx = rng.integers(0, len(videos), size=draws)
    t = rng.integers(1, model.schedule.T + 1, size=draws)
    sigma = model.schedule.sigma[t].astype(np.float32)[:, None, None, None, None]
    eps = rng.standard_normal((draws,) + data.shape[1:]).astype(np.float32)
    x_t = (1.0 - sigma) * data[idx] + sigma * eps
    eps_hat, _ = model.predict_eps(x_t, t)
    return float(np.mean((eps_hat - eps) ** 2))


# -- checkpoints --------------------------------------------------------------------


def save_checkpoint(path: str | Path, model: DiffusionModel, extra: dict | None = None) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "kind": "diffusion",
        "config": model.cfg.to_json(),
        "schedule": {"T": model.schedule.T, "sigma": [float(s) for s in model.schedule.sigma]},
    }
    if extra:
        meta.update(extra)
    (root / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for key, arr in model.net.state().items():
        blob.save(root / (key.replace("/", "_") + ".dbtn"), arr)


def load_checkpoint(path: str | Path) -> DiffusionModel:
    root = Path(path)
    meta = json.loads((root / "model.json").read_text())
    cfg = DiTConfig.from_json(meta["config"])
    sched = NoiseSchedule(T=meta["schedule"]["T"], sigma=np.asarray(meta["schedule"]["sigma"]))
    model = DiffusionModel(cfg, sched, seed=0)
    state = {}
    for key in model.net.params():
        state[key] = blob.load(root / (key.replace("/", "_") + ".dbtn"))
    model.net.load_state(state)
    return model
