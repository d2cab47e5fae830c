"""
MAM-FSD Optimizer
Adam with bias correction and decoupled weight decay
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .base import ConfigError, NonFiniteError
from .tensor import ACCUM, Tensor


@dataclass
class AdamState:
    """Per-parameter moments plus the shared step counter and hyperparameters."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    def ensure(self, params: Sequence[Tensor]) -> None:
        if not self.m:
            self.m = [np.zeros(p.shape, dtype=ACCUM) for p in params]
            self.v = [np.zeros(p.shape, dtype=ACCUM) for p in params]
        elif len(self.m) != len(params):
            raise ConfigError(f"optimizer state holds {len(self.m)} moments for {len(params)} parameters")


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState) -> AdamState:
    """
    One Adam update, in place on ``params`` and ``state``.

    Decoupled weight decay is applied first as
    param <- param - lr * weight_decay * param, then the bias-corrected Adam
    step. A missing gradient counts as zero.

    Raises:
        ConfigError: lr <= 0
        NonFiniteError: a gradient is not finite
    """
    if state.lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {state.lr}")
    state.ensure(params)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** t
    correction2 = 1.0 - b2 ** t

    for k, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros(p.shape, dtype=ACCUM) if g is None else np.asarray(g, dtype=ACCUM)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {p.name or f'parameter {k}'}")
        value = p.data.astype(ACCUM)
        if state.weight_decay:
            value = value - state.lr * state.weight_decay * value
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = state.m[k] / correction1
        v_hat = state.v[k] / correction2
        value = value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        p.data = value.astype(p.data.dtype)
    return state


class Adam:
    """Adam over a fixed, ordered parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
        self.state.ensure(self.params)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
