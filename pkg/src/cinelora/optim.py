"""AdamW with decoupled weight decay and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamWState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    epsilon: float = 1e-8

    @classmethod
    def for_param(cls, param: Tensor, **hyper) -> "AdamWState":
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), **hyper)


def adamw_step(param: Tensor, state: AdamWState, lr: float) -> None:
    """One bias-corrected AdamW update, in place.  ``param.grad`` is left as is."""
    if param.grad is None:
        raise ValueError(f"parameter {param.name or ''} has no gradient")
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    if state.first_moment.shape != param.data.shape:
        raise ValueError("optimizer state does not match parameter shape")

    g = param.grad
    state.step_count += 1
    k = state.step_count
    state.first_moment *= state.beta1
    state.first_moment += (1.0 - state.beta1) * g
    state.second_moment *= state.beta2
    state.second_moment += (1.0 - state.beta2) * (g * g)
    m_hat = state.first_moment / (1.0 - state.beta1**k)
    v_hat = state.second_moment / (1.0 - state.beta2**k)
    update = lr * m_hat / (np.sqrt(v_hat) + state.epsilon) + lr * state.weight_decay * param.data
    param.data -= update.astype(param.data.dtype, copy=False)


@dataclass(frozen=True)
class LrSchedule:
    peak_lr: float
    total_steps: int
    warmup_fraction: float = 0.05
    warmup_steps: int = field(init=False)

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        w = int(round(self.warmup_fraction * self.total_steps))
        if self.warmup_fraction > 0:
            w = min(max(w, 1), self.total_steps - 1) if self.total_steps > 1 else 0
        object.__setattr__(self, "warmup_steps", w)


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear warmup from 0 to the peak, then half-cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    w = schedule.warmup_steps
    if step < w:
        return schedule.peak_lr * step / w
    span = max(schedule.total_steps - w, 1)
    progress = (step - w) / span
    return 0.5 * schedule.peak_lr * (1.0 + math.cos(math.pi * progress))
