"""
MAM-FSD Frame-Level Self-Distillation
Stage-to-stage MSE losses between projected students and detached teachers
"""

import math
from dataclasses import dataclass
from typing import List, Tuple

from .backbone import Backbone, StageFeatures
from .base import ConfigError, NonFiniteError, ShapeError
from .tensor import Tensor, add, mse, scale, stop_gradient


@dataclass(frozen=True)
class DistillWeights:
    """Weights of the three stage losses (alpha, beta, lambda)."""

    alpha: float = 1.0
    beta: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.lam) < 0:
            raise ConfigError(f"distillation weights must be non-negative, got {self.as_tuple()}")

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.alpha, self.beta, self.lam)

    @property
    def enabled(self) -> bool:
        return any(w > 0 for w in self.as_tuple())


@dataclass(frozen=True)
class LossReport:
    """Scalar values of every loss term of one training step."""

    loss_total: float
    loss_task: float
    loss_mse: Tuple[float, float, float]
    weights: Tuple[float, float, float]

    @classmethod
    def zero(cls, weights: Tuple[float, float, float] = (0.0, 0.0, 0.0)) -> "LossReport":
        return cls(0.0, 0.0, (0.0, 0.0, 0.0), weights)

    def __add__(self, other: "LossReport") -> "LossReport":
        return LossReport(self.loss_total + other.loss_total,
                          self.loss_task + other.loss_task,
                          tuple(a + b for a, b in zip(self.loss_mse, other.loss_mse)),
                          self.weights)

    def scaled(self, factor: float) -> "LossReport":
        return LossReport(self.loss_total * factor, self.loss_task * factor,
                          tuple(v * factor for v in self.loss_mse), self.weights)


def self_distill_loss(stages: StageFeatures, backbone: Backbone,
                      weights: DistillWeights) -> Tuple[Tensor, List[Tensor]]:
    """
    L_i = mse(stop_gradient(S_{i+1}), dblock_i(S_i)) for i = 1..3.

    Every frame contributes the same element count, so the element mean is
    the mean of per-frame MSEs. Returns (alpha*L1 + beta*L2 + lambda*L3, [L1, L2, L3]).
    """
    if len(stages.stages) != 4:
        raise ShapeError(f"self-distillation needs 4 stage outputs, got {len(stages.stages)}")
    terms = []
    for i in range(1, 4):
        student = backbone.dblock_project(i, stages.stages[i - 1])
        teacher = stop_gradient(stages.stages[i])
        if student.shape != teacher.shape:
            raise ShapeError(f"D-block {i} output {list(student.shape)} != S{i + 1} {list(teacher.shape)}")
        terms.append(mse(teacher, student))
    alpha, beta, lam = weights.as_tuple()
    total = add(add(scale(terms[0], alpha), scale(terms[1], beta)), scale(terms[2], lam))
    return total, terms


def total_loss(task_loss: Tensor, distill: Tensor) -> Tensor:
    """task + distillation; both must be finite scalars."""
    for name, t in (("task", task_loss), ("distillation", distill)):
        if t.shape != ():
            raise ShapeError(f"{name} loss must be a scalar, got {list(t.shape)}")
        if not math.isfinite(t.item()):
            raise NonFiniteError(f"{name} loss is not finite")
    return add(task_loss, distill)
