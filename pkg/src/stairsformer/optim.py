"""Adam with the standard bias-corrected update rule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    """Per-parameter first/second moment buffers plus shared scalars."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_step(param: Tensor, grad: np.ndarray, state: AdamState) -> None:
    """One bias-corrected Adam update on `param`, in place."""
    if grad.shape != param.shape:
        raise ValueError(f"adam_step: grad shape {grad.shape} vs param {param.shape}")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"adam_step: non-finite gradient for {param.name or 'param'}")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    mhat = state.m / (1.0 - state.beta1 ** state.step)
    vhat = state.v / (1.0 - state.beta2 ** state.step)
    param.data -= state.learning_rate * mhat / (np.sqrt(vhat) + state.epsilon)


class Adam:
    """Optimizer over a named parameter dict (defaults lr=5e-4, betas 0.9/0.999)."""

    def __init__(self, params: Dict[str, Tensor], learning_rate: float = 5e-4,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        if learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {learning_rate}")
        self.params = params
        self.states: Dict[str, AdamState] = {
            name: AdamState(
                m=np.zeros_like(p.data),
                v=np.zeros_like(p.data),
                learning_rate=learning_rate,
                beta1=beta1,
                beta2=beta2,
                epsilon=epsilon,
            )
            for name, p in params.items()
        }

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        for name, p in self.params.items():
            g = p._grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"adam: non-finite gradient for parameter {name!r}")
            adam_step(p, g, self.states[name])

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p._grad is not None:
                total += float(np.sum(p._grad * p._grad))
        return float(np.sqrt(total))
