"""Linear DDPM noise schedule and the forward diffusion kernel.

Convention: ``betas[t]`` is the per-step variance increment,
``alpha_bars[t] = prod_{s<=t} (1 - betas[s])``, and the kernel is
``x_t = alpha_t * x0 + sigma_t * eps`` with ``alpha_t = sqrt(alpha_bars[t])``
and ``sigma_t = sqrt(1 - alpha_bars[t])``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WEIGHTINGS = ("unit", "snr")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alpha_bars: np.ndarray
    alpha_t: np.ndarray
    sigma_t: np.ndarray
    beta_start: float
    beta_end: float

    def check_t(self, t):
        t = np.asarray(t)
        if t.size and (np.any(t < 0) or np.any(t >= self.T)):
            raise ValueError(f"timestep out of range [0, {self.T})")
        return t

    def params(self):
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def linear_schedule(T=1000, beta_start=1e-4, beta_end=0.02) -> NoiseSchedule:
    if T < 2 or not 0 < beta_start <= beta_end < 1:
        raise ValueError(
            f"invalid schedule T={T}, beta_start={beta_start}, beta_end={beta_end}"
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    for arr in (betas, alpha_bars):
        arr.setflags(write=False)
    alpha_t = np.sqrt(alpha_bars)
    sigma_t = np.sqrt(1.0 - alpha_bars)
    alpha_t.setflags(write=False)
    sigma_t.setflags(write=False)
    return NoiseSchedule(T, betas, alpha_bars, alpha_t, sigma_t, beta_start, beta_end)


def _col(v, t):
    """Per-sample coefficient shaped to broadcast against (n, 2) points."""
    c = v[t]
    return c[:, None] if np.ndim(c) else c


def diffuse(x0, t, eps, sched: NoiseSchedule):
    t = sched.check_t(t)
    return _col(sched.alpha_t, t) * np.asarray(x0) + _col(sched.sigma_t, t) * np.asarray(eps)


def weight(t, mode: str, sched: NoiseSchedule):
    """Gradient weighting w(t): ``unit`` is 1, ``snr`` is sigma_t**2."""
    t = sched.check_t(t)
    if mode == "unit":
        return np.ones_like(sched.sigma_t[t])
    if mode == "snr":
        return sched.sigma_t[t] ** 2
    raise ValueError(f"unknown weighting {mode!r}; expected one of {WEIGHTINGS}")
