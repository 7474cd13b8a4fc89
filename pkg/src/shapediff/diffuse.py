"""Forward noising: closed-form jumps to step t, single Markov steps, and training pairs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schedule import NoiseSchedule
from .voxgrid import Prior2D, Sample, VoxelGrid


class MissingTarget(ValueError):
    pass


def as_array(x) -> np.ndarray:
    return x.values if isinstance(x, VoxelGrid) else np.asarray(x, dtype=np.float64)


def encode(binary) -> np.ndarray:
    """{0, 1} occupancy -> {-1, +1}."""
    return 2.0 * as_array(binary) - 1.0


def decode(x) -> np.ndarray:
    """Inverse of `encode` followed by clamping to [0, 1] and thresholding at 0.5."""
    v = np.clip((as_array(x) + 1.0) / 2.0, 0.0, 1.0)
    return (v > 0.5).astype(np.float64)


@dataclass
class NoisedPair:
    x_t: np.ndarray
    epsilon: np.ndarray
    t: int
    prior: Prior2D | None = None
    sample_id: str = ""


def forward_to_t(x0, t: int, schedule: NoiseSchedule, rng, prior: Prior2D | None = None) -> NoisedPair:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps with eps drawn from `rng` and kept."""
    x0 = as_array(x0)
    abar = schedule.lookup(t).alpha_bar
    eps = np.asarray(rng.standard_normal(x0.shape), dtype=np.float64)
    x_t = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps
    return NoisedPair(x_t, eps, int(t), prior)


def forward_step(x_prev, t: int, schedule: NoiseSchedule, rng) -> np.ndarray:
    """One draw from N(sqrt(1 - beta_t) x_prev, beta_t I)."""
    x_prev = as_array(x_prev)
    beta = schedule.lookup(t).beta
    return np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * rng.standard_normal(x_prev.shape)


def forward_chain(x0, t: int, schedule: NoiseSchedule, rng) -> np.ndarray:
    """Compose `forward_step` for steps 1..t."""
    schedule.check(t)
    x = as_array(x0)
    for s in range(1, t + 1):
        x = forward_step(x, s, schedule, rng)
    return x


def training_batch(samples: list[Sample], schedule: NoiseSchedule, rng) -> list[NoisedPair]:
    """One noised pair per sample with t ~ Uniform{1..T}, targets encoded to {-1, +1}."""
    out = []
    for s in samples:
        if s.target is None:
            raise MissingTarget(f"sample {s.id} has no target volume")
        t = int(rng.integers(1, schedule.T + 1))
        pair = forward_to_t(encode(s.target), t, schedule, rng, prior=s.prior)
        pair.sample_id = s.id
        out.append(pair)
    return out
