"""Linear noise schedule tables (beta, alpha, alpha_bar, sigma) indexed by step t = 1..T."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

VARIANCE_MODES = ("posterior", "beta")


class BadRange(ValueError):
    pass


class StepOutOfRange(IndexError):
    pass


class ScheduleEntry(NamedTuple):
    beta: float
    alpha: float
    alpha_bar: float
    sigma: float


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are stored 0-based; entry i holds step t = i + 1."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    variance_mode: str = "posterior"

    def alpha_bar_prev(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bar[:-1]])

    def check(self, t: int) -> int:
        if not (isinstance(t, (int, np.integer)) and 1 <= t <= self.T):
            raise StepOutOfRange(f"step {t} outside 1..{self.T}")
        return int(t) - 1

    def lookup(self, t: int) -> ScheduleEntry:
        i = self.check(t)
        return ScheduleEntry(
            float(self.beta[i]), float(self.alpha[i]), float(self.alpha_bar[i]), float(self.sigma[i])
        )


def build_schedule(beta, variance_mode: str = "posterior") -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size < 1:
        raise BadRange("beta must be a non-empty 1D array")
    if np.any(beta < 0) or np.any(beta >= 1):
        raise BadRange("beta values must lie in [0, 1)")
    if variance_mode not in VARIANCE_MODES:
        raise BadRange(f"variance_mode must be one of {VARIANCE_MODES}")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if variance_mode == "beta":
        var = beta.copy()
    else:
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        with np.errstate(invalid="ignore", divide="ignore"):
            var = np.where(1.0 - alpha_bar > 0, beta * (1.0 - prev) / (1.0 - alpha_bar), 0.0)
    return NoiseSchedule(len(beta), beta, alpha, alpha_bar, np.sqrt(var), variance_mode)


def linear_schedule(
    T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02, variance_mode: str = "posterior"
) -> NoiseSchedule:
    if T < 1:
        raise BadRange(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise BadRange(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    return build_schedule(beta, variance_mode)


def scaled_linear_schedule(
    T: int, beta_start: float = 1e-4, beta_end: float = 0.02, variance_mode: str = "posterior", ref_T: int = 1000
) -> NoiseSchedule:
    """Linear schedule whose endpoints are given for `ref_T` steps, rescaled by ref_T / T.

    Keeps the summed noise (and so abar_T ~ 0) roughly fixed for short chains; at T = ref_T it is
    `linear_schedule` unchanged.
    """
    if T < 1:
        raise BadRange(f"T must be >= 1, got {T}")
    k = ref_T / T
    return linear_schedule(T, beta_start * k, min(beta_end * k, 0.999), variance_mode)


def lookup(schedule: NoiseSchedule, t: int) -> ScheduleEntry:
    return schedule.lookup(t)


def dump_schedule_csv(schedule: NoiseSchedule, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "beta", "alpha", "alpha_bar", "sigma"])
        for i in range(schedule.T):
            w.writerow(
                [i + 1]
                + [repr(float(a[i])) for a in (schedule.beta, schedule.alpha, schedule.alpha_bar, schedule.sigma)]
            )
