"""Adam with classic L2 on selected parameters and a staircase learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


@dataclass(frozen=True)
class OptimizerConfig:
    lr0: float = 0.001
    beta1: float = 0.99
    beta2: float = 0.999
    adam_eps: float = 1e-8
    decay_step: int = 10_000
    decay_factor: float = 0.5
    l2_lambda: float = 0.001
    l2_param_names: frozenset = frozenset({"fc2.W"})

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.decay_step < 1:
            raise ValueError("decay_step must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be non-negative")
        object.__setattr__(self, "l2_param_names", frozenset(self.l2_param_names))


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def lr_at(step: int, cfg: OptimizerConfig) -> float:
    return cfg.lr0 * cfg.decay_factor ** (step // cfg.decay_step)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, cfg: OptimizerConfig) -> None:
    """Update ``params`` and ``state`` in place.

    The step counter is incremented first, so the first call uses bias
    corrections ``1 - beta**1`` and the learning rate at step 0.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    lr = lr_at(state.step, cfg)
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        if name in cfg.l2_param_names and cfg.l2_lambda:
            g = g + cfg.l2_lambda * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
