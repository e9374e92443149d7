"""Momentum SGD plus the learning-rate and adaptation-weight schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import RangeError, ShapeError
from .tensor_core import Tensor

LR_MODES = ("inverse_decay", "cosine")


@dataclass
class ScheduleConfig:
    mu0: float = 0.0005
    alpha: float = 10.0
    beta: float = 0.75
    lr_mode: str = "inverse_decay"
    total_batches: int = 1

    def __post_init__(self):
        if self.mu0 <= 0:
            raise RangeError("mu0 must be positive")
        if self.total_batches < 1:
            raise RangeError("total_batches must be >= 1")
        if self.lr_mode not in LR_MODES:
            raise RangeError(f"lr_mode must be one of {LR_MODES}")

    def learning_rate(self, p: float, t: float) -> float:
        if self.lr_mode == "cosine":
            return lr_cosine(t, self)
        return lr_inverse_decay(p, self)


def _check_unit(p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise RangeError(f"progress must lie in [0, 1], got {p}")


def lr_inverse_decay(p: float, cfg: ScheduleConfig) -> float:
    _check_unit(p)
    return cfg.mu0 / (1.0 + cfg.alpha * p) ** cfg.beta


def lr_cosine(t: float, cfg: ScheduleConfig) -> float:
    if not 0 <= t <= cfg.total_batches:
        raise RangeError(f"batch index {t} outside [0, {cfg.total_batches}]")
    return 0.5 * (1.0 + math.cos(t * math.pi / cfg.total_batches)) * cfg.mu0


def lambda_schedule(p: float) -> float:
    _check_unit(p)
    return 2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0


class SgdMomentum:
    """Classical momentum: v <- m*v + g; theta <- theta - mu*v.

    Velocities are keyed by parameter name and created on first use.
    """

    def __init__(self, momentum: float = 0.45):
        if not 0.0 <= momentum < 1.0:
            raise RangeError("momentum must lie in [0, 1)")
        self.momentum = momentum
        self.velocity: dict[str, Tensor] = {}

    def step(self, name: str, param: Tensor, grad: Tensor, mu: float) -> Tensor:
        """Update ``param`` in place and return it."""
        if param.shape != grad.shape:
            raise ShapeError(f"{name}: grad {grad.shape} vs param {param.shape}")
        v = self.velocity.get(name)
        if v is None:
            v = self.velocity[name] = np.zeros_like(param)
        v *= self.momentum
        v += grad
        param -= param.dtype.type(mu) * v
        return param


def sgd_step(opt: SgdMomentum, param: Tensor, grad: Tensor, mu: float, name: str = "param") -> Tensor:
    return opt.step(name, param, grad, mu)
