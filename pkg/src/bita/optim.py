"""AdamW with decoupled weight decay and the warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tensor

__all__ = [
    "OptimState",
    "ScheduleConfig",
    "adamw_step",
    "lr_at",
    "pretrain_schedule",
    "finetune_schedule",
    "clip_grad_norm",
]


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimState,
               lr: float, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-8,
               weight_decay: float = 0.05) -> None:
    """One in-place AdamW update of every tensor in ``params``.

    theta <- theta * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    decay = 1.0 - lr * weight_decay
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ShapeError(f"optimizer moment for {name!r} has shape {m.shape}, parameter {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data * decay - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for k in grads:
            grads[k] = grads[k] * factor
    return total


@dataclass(frozen=True)
class ScheduleConfig:
    warmup_steps: int
    lr_start: float
    lr_peak: float
    lr_min: float
    total_steps: int

    def __post_init__(self):
        if not 0 <= self.lr_start <= self.lr_peak:
            raise ValueError("need 0 <= lr_start <= lr_peak")
        if self.lr_min > self.lr_peak:
            raise ValueError("need lr_min <= lr_peak")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Linear warmup from lr_start to lr_peak, then cosine decay to lr_min."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    w = cfg.warmup_steps
    if step < w:
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * step / w
    p = (step - w) / (cfg.total_steps - w)
    return cfg.lr_min + (cfg.lr_peak - cfg.lr_min) * (1.0 + math.cos(math.pi * p)) / 2.0


def pretrain_schedule(total_steps: int) -> ScheduleConfig:
    """Pre-training constants: 5000 warmup steps, 1e-6 -> 1e-4, cosine to 1e-5."""
    return ScheduleConfig(5000, 1e-6, 1e-4, 1e-5, total_steps)


def finetune_schedule(total_steps: int) -> ScheduleConfig:
    """Fine-tuning constants: 2000 warmup steps, 1e-8 -> 1e-5, cosine to 0."""
    return ScheduleConfig(2000, 1e-8, 1e-5, 0.0, total_steps)
