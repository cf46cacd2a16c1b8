"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    peak_lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_steps: int = 10000
    total_steps: int = 100000
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyperparameters(self) -> dict:
        return {
            "peak_lr": self.peak_lr,
            "weight_decay": self.weight_decay,
            "warmup_steps": self.warmup_steps,
            "total_steps": self.total_steps,
            "betas": list(self.betas),
            "eps": self.eps,
        }


def lr_at(step: int, state: OptimizerState) -> float:
    """Linear ramp 0 -> peak over warmup, then cosine from peak down to 0 at total_steps."""
    if step < 0 or step > state.total_steps:
        raise ValueError(f"step {step} outside [0, {state.total_steps}]")
    warm = state.warmup_steps
    if warm > 0 and step <= warm:
        return state.peak_lr * step / warm
    span = state.total_steps - warm
    if span <= 0:
        return state.peak_lr
    frac = (step - warm) / span
    return state.peak_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def adamw_step(params: dict[str, Tensor], state: OptimizerState,
               grads: dict[str, np.ndarray] | None = None, lr: float | None = None) -> float:
    """Apply one AdamW update in place. Returns the learning rate used.

    Gradients default to each parameter's ``.grad``; a missing grad counts as zero.
    """
    if grads is None:
        grads = {name: p.grad for name, p in params.items()}
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    if lr is None:
        lr = lr_at(min(state.step, state.total_steps), state)
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.data.dtype)
    return lr
