"""Variance-preserving noise schedule and consistency scalings.

The discrete schedule lives on t = 0..T with alpha_0 = 1, sigma_0 = 0 and
alpha_t^2 + sigma_t^2 = 1 everywhere. The cosine profile's argument is
compressed so the cumulative product ends at ``alpha_bar_min`` instead of
collapsing to zero at t = T; an unguarded cosine tail makes the first
denoising hop amplify model error by 1/alpha_T, which destabilizes DDIM
trajectories for any imperfect network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_BETA_MAX = 0.999
_BETA_MIN = 1e-10


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete-time coefficients alpha_t, sigma_t on t = 0..T."""

    T: int = 1000
    sigma_data: float = 0.5
    cosine_offset: float = 0.008
    alpha_bar_min: float = 4e-3
    alpha: np.ndarray = field(init=False, repr=False)
    sigma: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not (0.0 < self.alpha_bar_min < 0.5):
            raise ValueError("alpha_bar_min must lie in (0, 0.5)")
        t = np.arange(self.T + 1, dtype=np.float64)
        s = self.cosine_offset

        def abar(lam: float) -> np.ndarray:
            f = np.cos((t / self.T + s) / (1 + s) * math.pi / 2.0 * lam) ** 2
            return f / f[0]

        # bisect the argument compression so that abar(T) == alpha_bar_min
        lo, hi = 0.1, 1.0
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if abar(mid)[-1] > self.alpha_bar_min:
                lo = mid
            else:
                hi = mid
        profile = abar(0.5 * (lo + hi))
        betas = np.clip(1.0 - profile[1:] / profile[:-1], _BETA_MIN, _BETA_MAX)
        cum = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        object.__setattr__(self, "alpha", np.sqrt(cum))
        object.__setattr__(self, "sigma", np.sqrt(1.0 - cum))

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [0, {self.T}]")

    def alpha_at(self, t):
        self.check_t(t)
        return self.alpha[np.asarray(t, dtype=np.int64)]

    def sigma_at(self, t):
        self.check_t(t)
        return self.sigma[np.asarray(t, dtype=np.int64)]

    def hyperparameters(self) -> dict:
        return {
            "T": self.T,
            "sigma_data": self.sigma_data,
            "cosine_offset": self.cosine_offset,
            "alpha_bar_min": self.alpha_bar_min,
        }


@dataclass(frozen=True)
class ConsistencyScalings:
    """Boundary-condition scalings c_skip(t), c_out(t).

    tau(t) = timestep_scaling * t over raw discrete timesteps, c_skip =
    sd^2 / (tau^2 + sd^2) and c_out = tau / sqrt(tau^2 + sd^2): the
    clean-image map is the exact identity at t = 0 and essentially the
    denoised estimate everywhere else. Keeping c_skip negligible for t >= 1
    matters; a slowly decaying c_skip blends noisy state into low-noise
    clean estimates and wrecks few-step sampling.
    """

    T: int = 1000
    sigma_data: float = 0.5
    timestep_scaling: float = 10.0

    def tau(self, t):
        return self.timestep_scaling * np.asarray(t, dtype=np.float64)

    def c_skip(self, t):
        tau = self.tau(t)
        return self.sigma_data**2 / (tau**2 + self.sigma_data**2)

    def c_out(self, t):
        tau = self.tau(t)
        return tau / np.sqrt(tau**2 + self.sigma_data**2)

    @classmethod
    def for_schedule(cls, sched: NoiseSchedule, timestep_scaling: float = 10.0) -> "ConsistencyScalings":
        return cls(T=sched.T, sigma_data=sched.sigma_data, timestep_scaling=timestep_scaling)


def timestep_grid(T: int, steps: int) -> np.ndarray:
    """Uniformly spaced integer grid from T down to 0 with ``steps`` intervals."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    return np.rint(np.linspace(T, 0, steps + 1)).astype(np.int64)


def shifted_grid(T: int, steps: int, power: float = 2.0) -> np.ndarray:
    """Grid from T to 0 whose nodes concentrate at low noise.

    Few-step consistency sampling refines most near the end of the
    trajectory; spending its sparse evaluations there measurably beats the
    uniform spacing.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    frac = ((steps - np.arange(steps + 1)) / steps) ** power
    grid = np.rint(T * frac).astype(np.int64)
    grid[0], grid[-1] = T, 0
    return grid
