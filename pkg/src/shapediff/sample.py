"""Ancestral reverse chain: conditional 3D reconstructions from noise plus a 2D prior."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .denoise import assemble_input, predict
from .diffuse import decode
from .schedule import NoiseSchedule
from .voxgrid import Prior2D, VoxelGrid, write_voxel_file


class NonFiniteState(FloatingPointError):
    pass


@dataclass
class SamplerConfig:
    schedule: NoiseSchedule
    denoiser: object
    clamp_range: tuple[float, float] | None = None
    record_trajectory: bool = False
    record_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.clamp_range is not None and not self.clamp_range[0] < self.clamp_range[1]:
            raise ValueError(f"clamp range {self.clamp_range} must satisfy lo < hi")


@dataclass
class SampleResult:
    grid: VoxelGrid
    raw: np.ndarray
    trajectory: dict[int, np.ndarray] = field(default_factory=dict)


def step_sigma(config: SamplerConfig, t: int) -> float:
    """Schedule sigma_t, unless the denoiser supplies its own reverse std (`reverse_sigma`)."""
    own = getattr(config.denoiser, "reverse_sigma", None)
    return float(own(t)) if own is not None else float(config.schedule.sigma[t - 1])


def reverse_step(x_t: np.ndarray, prior: Prior2D, t: int, config: SamplerConfig, rng) -> np.ndarray:
    """x_{t-1} = (x_t - (1 - a_t) / sqrt(1 - abar_t) * eps_hat) / sqrt(a_t) + sigma_t z, z = 0 at t = 1.

    `x_t` may be a single volume or a batch of independent chains sharing `prior`.
    """
    sch = config.schedule
    _, alpha, abar, _ = sch.lookup(t)
    sigma = step_sigma(config, t)
    eps_hat = predict(config.denoiser, assemble_input(x_t, prior, t, sch), t)
    mean = (x_t - (1.0 - alpha) / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
    if t > 1:
        x_prev = mean + sigma * rng.standard_normal(np.shape(x_t))
    else:
        x_prev = mean
    if config.clamp_range is not None:
        x_prev = np.clip(x_prev, *config.clamp_range)
    if not np.all(np.isfinite(x_prev)):
        raise NonFiniteState(f"reverse chain diverged at step {t}")
    return x_prev


def run_chain(prior: Prior2D, dims, config: SamplerConfig, rng, n_chains: int | None = None):
    """Run T..1 from x_T ~ N(0, I); returns the final continuous state and optional snapshots.

    With `n_chains` the chains run as one batch drawing from a shared generator.
    """
    shape = tuple(dims) if n_chains is None else (n_chains,) + tuple(dims)
    x = rng.standard_normal(shape)
    traj: dict[int, np.ndarray] = {}
    T = config.schedule.T
    if config.record_trajectory:
        traj[T] = x.copy()
    for t in range(T, 0, -1):
        x = reverse_step(x, prior, t, config, rng)
        if config.record_trajectory and ((t - 1) % config.record_every == 0):
            traj[t - 1] = x.copy()
    return x, traj


def sample_shape(prior: Prior2D, dims, config: SamplerConfig, rng=None) -> SampleResult:
    """One reconstruction, decoded from {-1, +1} and thresholded at 0.5."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    x, traj = run_chain(prior, dims, config, rng)
    return SampleResult(VoxelGrid(decode(x), binary=True), x, traj)


def chain_seeds(seed: int, k: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(k)]


def sample_k(prior: Prior2D, dims, config: SamplerConfig, k: int, seed: int | None = None) -> list[VoxelGrid]:
    """k independent chains, each seeded from a seed derived from (`seed`, chain index).

    Chains are advanced together as one batch, which leaves each chain's draws identical to
    running it alone with its derived seed.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    seed = config.seed if seed is None else seed
    rngs = [np.random.default_rng(s) for s in chain_seeds(seed, k)]
    x = np.stack([r.standard_normal(tuple(dims)) for r in rngs])
    T = config.schedule.T
    batched = _BatchRng(rngs)
    for t in range(T, 0, -1):
        x = reverse_step(x, prior, t, config, batched)
    return [VoxelGrid(decode(xi), binary=True) for xi in x]


class _BatchRng:
    """Draws a (k, ...) normal array as k per-chain draws from their own generators."""

    def __init__(self, rngs):
        self.rngs = rngs

    def standard_normal(self, shape):
        return np.stack([r.standard_normal(shape[1:]) for r in self.rngs])


def sample_batch(priors: list[Prior2D], dims, config: SamplerConfig, seeds: list[int]) -> list[np.ndarray]:
    """Final continuous states for several priors at once, one seeded chain per prior.

    Equivalent per chain to `run_chain(prior_i, dims, config, default_rng(seeds[i]))`.
    """
    if len(priors) != len(seeds):
        raise ValueError("need one seed per prior")
    if not priors:
        return []
    rngs = [np.random.default_rng(s) for s in seeds]
    x = np.stack([r.standard_normal(tuple(dims)) for r in rngs])
    sch = config.schedule
    for t in range(sch.T, 0, -1):
        _, alpha, abar, _ = sch.lookup(t)
        sigma = step_sigma(config, t)
        inp = np.concatenate(
            [assemble_input(x[i:i + 1], p, t, sch) for i, p in enumerate(priors)], axis=0
        )
        eps_hat = predict(config.denoiser, inp, t)
        x = (x - (1.0 - alpha) / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
        if t > 1:
            x = x + sigma * np.stack([r.standard_normal(tuple(dims)) for r in rngs])
        if config.clamp_range is not None:
            x = np.clip(x, *config.clamp_range)
        if not np.all(np.isfinite(x)):
            raise NonFiniteState(f"reverse chain diverged at step {t}")
    return list(x)


def dump_trajectory(traj: dict[int, np.ndarray], out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for step in sorted(traj, reverse=True):
        p = out_dir / f"step_{step:04d}.vox"
        write_voxel_file(VoxelGrid(np.asarray(traj[step], dtype=np.float64)), p, dtype="f32")
        paths.append(p)
    return paths
