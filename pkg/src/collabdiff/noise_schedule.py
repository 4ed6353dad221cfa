"""Noise schedule, forward noising, DDIM / renoise steps, score <-> noise conversion.

``alpha_bar`` is indexed ``0..T`` with ``alpha_bar[0] == 1`` and decreases
strictly towards ``alpha_bar[T]``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


class ScheduleError(ValueError):
    pass


class BoundaryStep(ScheduleError):
    """Score and noise are not interconvertible where alpha_bar == 1."""


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray  # length T + 1, betas[0] == 0
    alpha_bar: np.ndarray  # length T + 1, alpha_bar[0] == 1
    style: str = "scaled_linear"
    beta_start: float = 8.5e-4
    beta_end: float = 1.2e-2

    def __post_init__(self):
        ab = self.alpha_bar
        if self.T < 1 or len(ab) != self.T + 1:
            raise ScheduleError("alpha_bar must have T + 1 entries")
        if ab[0] != 1.0:
            raise ScheduleError("alpha_bar[0] must be 1")
        if not np.all(np.diff(ab) < 0):
            raise ScheduleError("alpha_bar must be strictly decreasing")
        if not (ab[-1] > 0 and ab[-1] < 1e-2):
            raise ScheduleError(f"alpha_bar[T] = {ab[-1]:.3g} must lie in (0, 1e-2)")

    @classmethod
    def create(
        cls,
        T: int = 1000,
        style: str = "scaled_linear",
        beta_start: float = 8.5e-4,
        beta_end: float = 1.2e-2,
    ) -> "NoiseSchedule":
        if style == "linear":
            betas = np.linspace(beta_start, beta_end, T)
        elif style == "scaled_linear":
            betas = np.linspace(beta_start**0.5, beta_end**0.5, T) ** 2
        else:
            raise ScheduleError(f"unknown schedule style {style!r}")
        betas = np.concatenate([[0.0], betas])
        alpha_bar = np.cumprod(1.0 - betas)
        return cls(T, betas, alpha_bar, style, beta_start, beta_end)

    def __getitem__(self, t: int) -> float:
        return float(self.alpha_bar[t])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "beta", "alpha_bar"])
            for t in range(self.T + 1):
                w.writerow([t, repr(float(self.betas[t])), repr(float(self.alpha_bar[t]))])


@dataclass(frozen=True)
class StepPlan:
    timesteps: tuple[int, ...]
    eta: float = 0.0

    def __post_init__(self):
        ts = tuple(int(t) for t in self.timesteps)
        if not ts:
            raise ScheduleError("step plan is empty")
        if any(b >= a for a, b in zip(ts, ts[1:])):
            raise ScheduleError("timesteps must be strictly decreasing")
        if ts[-1] < 1:
            raise ScheduleError("timesteps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ScheduleError("eta must lie in [0, 1]")
        object.__setattr__(self, "timesteps", ts)

    @classmethod
    def uniform(cls, schedule: NoiseSchedule, n: int = 25, eta: float = 0.0) -> "StepPlan":
        """``n`` evenly strided steps ending one stride above 0, starting at T."""
        if not 1 <= n <= schedule.T:
            raise ScheduleError(f"cannot take {n} steps out of {schedule.T}")
        stride = schedule.T // n
        return cls(tuple(schedule.T - i * stride for i in range(n)), eta)

    def pairs(self):
        """(t, t_prev) transitions, the last one landing on 0."""
        ts = self.timesteps
        return list(zip(ts, ts[1:] + (0,)))


def _check_t(s: NoiseSchedule, t: int) -> None:
    if not 0 <= t <= s.T:
        raise ScheduleError(f"step {t} outside 0..{s.T}")


def forward_noise(v0, t: int, eps, s: NoiseSchedule) -> np.ndarray:
    v0 = np.asarray(v0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if v0.shape != eps.shape:
        raise ValueError(f"shape mismatch {v0.shape} vs {eps.shape}")
    _check_t(s, t)
    a = s[t]
    return np.sqrt(a) * v0 + np.sqrt(1.0 - a) * eps


def predict_v0(v_t, eps_pred, t: int, s: NoiseSchedule) -> np.ndarray:
    a = s[t]
    return (v_t - np.sqrt(1.0 - a) * eps_pred) / np.sqrt(a)


def ddim_step(v_t, eps_pred, t: int, t_prev: int, s: NoiseSchedule, eta: float = 0.0, rng=None):
    """One DDIM update from level ``t`` down to ``t_prev``."""
    if not t > t_prev >= 0:
        raise ScheduleError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    _check_t(s, t)
    v_t = np.asarray(v_t, dtype=float)
    eps_pred = np.asarray(eps_pred, dtype=float)
    a, a_prev = s[t], s[t_prev]
    v0_hat = predict_v0(v_t, eps_pred, t, s)
    if eta == 0.0:
        return np.sqrt(a_prev) * v0_hat + np.sqrt(1.0 - a_prev) * eps_pred
    sigma2 = eta**2 * (1.0 - a_prev) / (1.0 - a) * (1.0 - a / a_prev)
    if rng is None:
        raise ValueError("eta > 0 requires an rng")
    noise = rng.standard_normal(v_t.shape)
    return np.sqrt(a_prev) * v0_hat + np.sqrt(1.0 - a_prev - sigma2) * eps_pred + np.sqrt(sigma2) * noise


def renoise(v_prev, t: int, s: NoiseSchedule, rng, t_prev: int | None = None) -> np.ndarray:
    """Lift a sample from level ``t_prev`` (default ``t - 1``) back up to level ``t``."""
    t_prev = t - 1 if t_prev is None else t_prev
    if not 0 <= t_prev < t <= s.T:
        raise ScheduleError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    ratio = s[t] / s[t_prev]
    if ratio > 1.0:
        raise ScheduleError("alpha_bar must not increase from t_prev to t")
    v_prev = np.asarray(v_prev, dtype=float)
    noise = rng.standard_normal(v_prev.shape)
    if ratio == 1.0:
        return v_prev.copy()
    return np.sqrt(ratio) * v_prev + np.sqrt(1.0 - ratio) * noise


def score_from_noise(eps_pred, t: int, s: NoiseSchedule) -> np.ndarray:
    a = s[t]
    if not 0.0 < a < 1.0:
        raise BoundaryStep(f"alpha_bar[{t}] = {a} leaves the score undefined")
    return -np.asarray(eps_pred, dtype=float) / np.sqrt(1.0 - a)


def noise_from_score(score, t: int, s: NoiseSchedule) -> np.ndarray:
    a = s[t]
    if not 0.0 < a < 1.0:
        raise BoundaryStep(f"alpha_bar[{t}] = {a} leaves the score undefined")
    return -np.asarray(score, dtype=float) * np.sqrt(1.0 - a)
