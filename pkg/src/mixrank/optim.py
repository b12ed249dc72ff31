"""AdamW with decoupled weight decay and a warmup-cosine learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import TrainingError


@dataclass(frozen=True)
class OptimizerHyper:
    peak_lr: float = 3e-3
    warmup_steps: int = 50
    total_steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    floor_ratio: float = 0.1

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "peak_lr", "warmup_steps", "total_steps", "beta1", "beta2", "eps",
            "weight_decay", "floor_ratio")}


def lr_at(hyper: OptimizerHyper, step: int) -> float:
    """Linear 0->peak over warmup, then cosine decay to floor_ratio * peak."""
    if step < 0 or step > hyper.total_steps:
        raise ValueError(f"step {step} outside [0, {hyper.total_steps}]")
    if step < hyper.warmup_steps:
        return hyper.peak_lr * step / hyper.warmup_steps
    span = max(1, hyper.total_steps - hyper.warmup_steps)
    progress = (step - hyper.warmup_steps) / span
    cosine = 0.5 * (1.0 + np.cos(np.pi * progress))
    return hyper.peak_lr * (hyper.floor_ratio + (1.0 - hyper.floor_ratio) * cosine)


class AdamW:
    """Per-parameter moment state; `step(lr)` consumes `.grad` on each tensor.

    Weight decay is decoupled: applied directly to parameters, never folded
    into the gradient moments.
    """

    def __init__(self, params: list[Tensor], hyper: OptimizerHyper):
        self.params = params
        self.hyper = hyper
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step_count = 0

    def step(self, lr: float) -> None:
        h = self.hyper
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - h.beta1 ** t
        bias2 = 1.0 - h.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise TrainingError("non-finite gradient; aborting training step")
            self.m[i] = h.beta1 * self.m[i] + (1.0 - h.beta1) * g
            self.v[i] = h.beta2 * self.v[i] + (1.0 - h.beta2) * g * g
            m_hat = self.m[i] / bias1
            v_hat = self.v[i] / bias2
            if h.weight_decay:
                p.data -= lr * h.weight_decay * p.data
            p.data -= lr * m_hat / (np.sqrt(v_hat) + h.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
