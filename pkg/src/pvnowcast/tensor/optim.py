"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import Tensor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def for_param(cls, param: Tensor, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), lr=lr, **kw)


def adam_step(params: Sequence[Tensor], states: Sequence[AdamState]) -> None:
    """Apply one Adam update to each parameter, then clear its gradient."""
    for p in params:
        if p.grad is None:
            label = p.name or repr(p)
            raise ValueError(f"adam_step: parameter {label} has no gradient")
    for p, s in zip(params, states):
        if s.m.shape != p.shape:
            raise ValueError(f"adam_step: state shape {s.m.shape} does not match parameter {p.shape}")
        g = p.grad
        s.t += 1
        s.m *= s.beta1
        s.m += (1 - s.beta1) * g
        s.v *= s.beta2
        s.v += (1 - s.beta2) * (g * g)
        m_hat = s.m / (1 - s.beta1 ** s.t)
        v_hat = s.v / (1 - s.beta2 ** s.t)
        p.data -= (s.lr * m_hat / (np.sqrt(v_hat) + s.eps)).astype(p.dtype)
        p.grad = None


@dataclass
class Adam:
    """Adam over parameter groups, each group with its own learning rate."""

    params: list = field(default_factory=list)
    states: list = field(default_factory=list)

    def add_group(self, params: Iterable[Tensor], lr: float, **kw) -> None:
        for p in params:
            self.params.append(p)
            self.states.append(AdamState.for_param(p, lr=lr, **kw))

    def step(self) -> None:
        adam_step(self.params, self.states)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
