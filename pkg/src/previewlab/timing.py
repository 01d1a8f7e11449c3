"""Timing harness for the preview-overhead property.

Compares the wall-clock cost of one multi-modal preview decode against one
full sampling trajectory on the same model; reports the median over a few
repetitions of each.
"""

from __future__ import annotations

import time

import numpy as np

from .decoder import MBDecoder
from .diffusion import DiffusionModel, sample_ode
from .rng import stream


def _median_time(fn, reps: int) -> float:
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def measure_preview_overhead(
    model: DiffusionModel, decoder: MBDecoder, tap_block: int, seed: int = 0, reps: int = 5
) -> dict[str, float]:
    """Median seconds for one decode vs one full T-step trajectory."""
    c = model.cfg
    x = stream(seed, "timing").standard_normal((c.frames, c.height, c.width, c.channels)).astype(np.float32)
    _, feats = model.predict_eps(x[None], model.schedule.T - 1, taps=[tap_block])
    tap = feats[tap_block][0]

    decoder.decode(tap)  # warm up caches/allocators
    decode_s = _median_time(lambda: decoder.decode(tap), reps)
    trajectory_s = _median_time(lambda: sample_ode(model, model.schedule.T, seed, count=1), max(2, reps // 2))
    return {
        "decode_s": decode_s,
        "trajectory_s": trajectory_s,
        "ratio": decode_s / trajectory_s,
        "steps": model.schedule.T,
    }
