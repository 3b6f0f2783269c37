"""AdamW with decoupled weight decay, global-norm gradient clipping, a
linear-decay learning-rate schedule, and EMA parameter averaging."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    lr_start: float = 1e-3
    lr_schedule: str = "linear_decay"
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    grad_clip: float = 0.7
    epochs: int = 60
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr_schedule != "linear_decay":
            raise ValueError("only the linear_decay schedule is supported")
        for name in ("lr_start", "batch_size", "epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


PAPER_PRESET = TrainConfig(lr_start=3e-5, batch_size=12, beta1=0.9, beta2=0.95,
                           weight_decay=0.1, grad_clip=0.7, epochs=60)
DESK_PRESET = TrainConfig()  # same optimizer settings, lr raised for tiny models


def learning_rate(config: TrainConfig, step: int, total_steps: int) -> float:
    """Linear decay from lr_start toward 0 across the run; nonincreasing."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    frac = min(step, total_steps) / total_steps
    return config.lr_start * (1.0 - frac)


@dataclass
class AdamWState:
    total_steps: int
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], total_steps: int) -> "AdamWState":
        return cls(total_steps,
                   {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
               state: AdamWState, config: TrainConfig, step: int) -> float:
    """One in-place decoupled-weight-decay Adam update with bias correction.

    ``step`` counts completed optimizer steps (0-based); the learning rate
    comes from the linear decay schedule.  Returns the rate used.
    """
    lr = learning_rate(config, step, state.total_steps)
    b1, b2 = config.beta1, config.beta2
    t = step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        if config.weight_decay:
            p *= 1.0 - lr * config.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return lr


def gradient_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values())))


def clip_gradients(grads: dict[str, np.ndarray], threshold: float) -> float:
    """Global L2-norm clipping in place; returns the pre-clip norm."""
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    norm = gradient_norm(grads)
    if norm > threshold:
        scale = threshold / norm
        for g in grads.values():
            g *= scale
    return norm


def ema_update(teacher: dict[str, np.ndarray], student: Mapping[str, np.ndarray],
               decay: float) -> dict[str, np.ndarray]:
    """teacher <- decay * teacher + (1 - decay) * student, in place."""
    if not 0.0 <= decay < 1.0:
        raise ValueError("decay must lie in [0, 1)")
    if set(teacher) != set(student):
        raise ValueError("teacher and student parameter sets differ")
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}")
        t *= decay
        t += (1.0 - decay) * s
    return teacher
