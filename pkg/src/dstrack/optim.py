"""Adam with decoupled weight decay, operating on :class:`Parameter` buffers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .autodiff import NonFiniteError, Parameter


@dataclass(frozen=True)
class OptimizerConfig:
    """Update-rule settings. Moment decays and weight decay are library
    defaults; only the 1e-3 starting learning rate is externally sourced."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("moment decays must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def adam_step(params: Iterable[Parameter], config: OptimizerConfig) -> None:
    """One decoupled-weight-decay Adam update; gradients are cleared after."""
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(
                f"non-finite gradient in parameter {p.name or '<unnamed>'}"
            )
    lr = config.learning_rate
    for p in params:
        p.steps += 1
        t = p.steps
        if config.weight_decay:
            p.value *= 1.0 - lr * config.weight_decay
        p.m *= config.beta1
        p.m += (1.0 - config.beta1) * p.grad
        p.v *= config.beta2
        p.v += (1.0 - config.beta2) * np.square(p.grad)
        bias1 = 1.0 - config.beta1**t
        bias2 = 1.0 - config.beta2**t
        denom = np.sqrt(p.v / bias2)
        denom += config.eps
        p.value -= (lr / bias1) * p.m / denom
        p.zero_grad()
