"""Noise schedule, forward noising, the DDPM reverse step and guidance mixing.

All functions operate on plain numpy arrays; the denoiser is the only
differentiable component of the pipeline, so sampling math stays outside
the autograd graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alphas_cumprod: np.ndarray
    # original diffusion timestep each entry corresponds to (identity unless respaced)
    timesteps: np.ndarray

    @property
    def T_diff(self) -> int:
        return len(self.betas)

    @classmethod
    def from_betas(cls, betas, timesteps=None) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) == 0:
            raise ValueError("betas must be a non-empty 1-D array")
        if np.any(betas < 0) or np.any(betas >= 1):
            raise ValueError("betas must lie in [0, 1)")
        acp = np.empty_like(betas)
        running = 1.0
        for i, b in enumerate(betas):
            running = running * (1.0 - b)
            acp[i] = running
        if timesteps is None:
            timesteps = np.arange(len(betas))
        return cls(betas, acp, np.asarray(timesteps, dtype=np.int64))

    @classmethod
    def linear(cls, T_diff: int = 100, beta_start: float | None = None,
               beta_end: float | None = None) -> "NoiseSchedule":
        """Linear betas.  Defaults are the 1000-step 1e-4..0.02 range scaled by 1000/T_diff
        (capped at 0.999), so the chain still ends near pure noise for short schedules."""
        scale = 1000.0 / T_diff
        beta_start = 1e-4 * scale if beta_start is None else beta_start
        beta_end = 0.02 * scale if beta_end is None else beta_end
        return cls.from_betas(np.minimum(np.linspace(beta_start, beta_end, T_diff), 0.999))

    def respace(self, steps: int) -> "NoiseSchedule":
        """Sub-sample ``steps`` timesteps, evenly strided, keeping the same ᾱ at each kept step."""
        if not 1 <= steps <= self.T_diff:
            raise ValueError(f"steps must be in [1, {self.T_diff}], got {steps}")
        # a single step must start from the noisiest timestep
        start = 0 if steps > 1 else self.T_diff - 1
        keep = np.unique(np.round(np.linspace(start, self.T_diff - 1, steps)).astype(np.int64))
        acp = self.alphas_cumprod[keep]
        prev = np.concatenate([[1.0], acp[:-1]])
        return NoiseSchedule.from_betas(1.0 - acp / prev, timesteps=self.timesteps[keep])


def _check(t: int, schedule: NoiseSchedule | None = None, n: int | None = None):
    n = schedule.T_diff if schedule is not None else n
    if not 0 <= t < n:
        raise ValueError(f"timestep {t} outside [0, {n})")


def _same_shape(a: np.ndarray, b: np.ndarray):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def forward_noise_step(x_prev, t: int, noise, schedule: NoiseSchedule) -> np.ndarray:
    """One step of the forward chain: sqrt(1-β_t)·x_{t-1} + sqrt(β_t)·ε."""
    _same_shape(x_prev, noise)
    _check(t, schedule)
    b = schedule.betas[t]
    x_prev = np.asarray(x_prev)
    dt = x_prev.dtype if x_prev.dtype.kind == "f" else np.float64
    return (np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * np.asarray(noise)).astype(dt, copy=False)


def forward_noise_closed(x0, t: int, noise, schedule: NoiseSchedule) -> np.ndarray:
    """Jump straight to step t: sqrt(ᾱ_t)·x0 + sqrt(1-ᾱ_t)·ε."""
    _same_shape(x0, noise)
    _check(t, schedule)
    a = schedule.alphas_cumprod[t]
    x0 = np.asarray(x0)
    dt = x0.dtype if x0.dtype.kind == "f" else np.float64
    return (np.sqrt(a) * x0 + np.sqrt(1.0 - a) * np.asarray(noise)).astype(dt, copy=False)


def ddpm_mean(x_t, eps_hat, t: int, schedule: NoiseSchedule) -> np.ndarray:
    b = schedule.betas[t]
    a = schedule.alphas_cumprod[t]
    return (np.asarray(x_t) - (b / np.sqrt(1.0 - a)) * np.asarray(eps_hat)) / np.sqrt(1.0 - b)


def ddpm_reverse_step(x_t, eps_hat, t: int, schedule: NoiseSchedule, noise=None) -> np.ndarray:
    """Sample x_{t-1} given the predicted noise; σ_t = sqrt(β_t), no noise at t = 0."""
    _same_shape(x_t, eps_hat)
    _check(t, schedule)
    x_t = np.asarray(x_t)
    dt = x_t.dtype if x_t.dtype.kind == "f" else np.float64
    mean = ddpm_mean(x_t, eps_hat, t, schedule)
    if t > 0 and noise is not None:
        _same_shape(x_t, noise)
        mean = mean + np.sqrt(schedule.betas[t]) * np.asarray(noise)
    return mean.astype(dt, copy=False)


def predict_x0(x_t, eps_hat, t: int, schedule: NoiseSchedule) -> np.ndarray:
    a = schedule.alphas_cumprod[t]
    return (np.asarray(x_t) - np.sqrt(1.0 - a) * np.asarray(eps_hat)) / np.sqrt(a)


def cfg_combine(eps_cond, eps_uncond, scale: float) -> np.ndarray:
    """Classifier-free guidance: eps_uncond + scale·(eps_cond - eps_uncond)."""
    _same_shape(eps_cond, eps_uncond)
    if scale < 0:
        raise ValueError(f"guidance scale must be non-negative, got {scale}")
    eps_cond, eps_uncond = np.asarray(eps_cond), np.asarray(eps_uncond)
    return eps_uncond + scale * (eps_cond - eps_uncond)
