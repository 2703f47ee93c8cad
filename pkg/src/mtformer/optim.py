"""Decoupled-weight-decay Adam and the warmup-cosine learning rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericsError


@dataclass
class OptimState:
    """Moment buffers keyed like the parameter dict, plus the step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimState, lr: float) -> None:
    """One bias-corrected Adam update, in place.

    Weight decay is decoupled: theta <- theta * (1 - lr * wd) happens
    independently of the gradient term, so a zero gradient with wd > 0
    still shrinks the parameter by exactly that factor.
    """
    if lr < 0:
        raise ConfigurationError(f"learning rate must be >= 0, got {lr}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise NumericsError(f"non-finite gradient in {name} at optimizer step {t}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass(frozen=True)
class ScheduleSpec:
    total_steps: int
    peak_lr: float = 5e-5
    warmup_steps: int = 2000
    floor_lr: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigurationError(
                f"need 0 <= warmup ({self.warmup_steps}) <= total ({self.total_steps})")
        if not 0 <= self.floor_lr <= self.peak_lr:
            raise ConfigurationError(
                f"need 0 <= floor ({self.floor_lr}) <= peak ({self.peak_lr})")


def lr_schedule(step: int, spec: ScheduleSpec) -> float:
    """Linear 0 -> peak over the warmup, then cosine decay peak -> floor."""
    if not 0 <= step <= spec.total_steps:
        raise ConfigurationError(
            f"step {step} outside [0, {spec.total_steps}]")
    if step < spec.warmup_steps:
        return spec.peak_lr * step / spec.warmup_steps
    span = spec.total_steps - spec.warmup_steps
    if span == 0:
        return spec.peak_lr
    frac = (step - spec.warmup_steps) / span
    return spec.floor_lr + (spec.peak_lr - spec.floor_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))
