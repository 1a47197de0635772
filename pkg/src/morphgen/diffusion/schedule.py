"""Linear variance schedule and the closed-form forward marginal."""
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError


class StepRangeError(ValueError):
    pass


@dataclass
class NoiseSchedule:
    """Per-step quantities for t = 1..T, stored at index t - 1."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def check_step(self, t, low=1):
        t_arr = np.asarray(t)
        if t_arr.size == 0 or t_arr.min() < low or t_arr.max() > self.T:
            raise StepRangeError(f"timestep {t} outside [{low}, {self.T}]")

    def at(self, name, t):
        """Look up ``beta``/``alpha``/``alpha_bar`` for step(s) ``t`` (1-based)."""
        self.check_step(t)
        return getattr(self, name)[np.asarray(t) - 1]

    @property
    def params(self):
        return {"T": self.T, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}


def build_schedule(T=1000, beta_start=1e-4, beta_end=0.02):
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(int(T), beta, alpha, np.cumprod(alpha))


def q_sample(z0, t, noise, schedule):
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) noise``; ``t`` is a scalar or one step per batch row."""
    z0 = np.asarray(z0)
    noise = np.asarray(noise)
    if z0.shape != noise.shape:
        raise ShapeError(f"q_sample: noise {noise.shape} does not match z0 {z0.shape}")
    ab = schedule.at("alpha_bar", t)
    if np.ndim(ab):
        ab = ab.reshape((-1,) + (1,) * (z0.ndim - 1))
    out = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * noise
    return out.astype(z0.dtype, copy=False) if np.issubdtype(z0.dtype, np.floating) else out
