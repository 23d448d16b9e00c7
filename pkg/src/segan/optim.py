"""Optimizers and learning-rate schedules for dicts of named parameters.

Steps are functional: they return new parameter dicts and mutate only the
optimizer's own slot buffers. All arithmetic stays in the parameter dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class PolySchedule:
    """lr(i) = lr0 * (1 - i/maxiter) ** power."""

    lr0: float
    power: float = 0.9
    maxiter: int = 1

    def __post_init__(self):
        if self.lr0 < 0:
            raise ValueError(f"lr0 must be >= 0, got {self.lr0}")
        if self.maxiter < 1:
            raise ValueError(f"maxiter must be >= 1, got {self.maxiter}")


def poly_lr(sched: PolySchedule, iteration: int) -> float:
    if not 0 <= iteration <= sched.maxiter:
        raise ValueError(
            f"iteration {iteration} outside schedule range [0, {sched.maxiter}]"
        )
    return sched.lr0 * (1.0 - iteration / sched.maxiter) ** sched.power


@dataclass
class SGD:
    """SGD with classical momentum and decoupled L2 weight decay.

    update: v = momentum*v + grad + wd*param; param -= lr*v
    """

    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def step(
        self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float
    ) -> dict[str, np.ndarray]:
        out = {}
        for name, p in params.items():
            g = grads[name].astype(p.dtype, copy=False)
            if self.weight_decay:
                g = g + p.dtype.type(self.weight_decay) * p
            v = self.velocity.get(name)
            v = g if v is None else p.dtype.type(self.momentum) * v + g
            self.velocity[name] = v
            out[name] = p - p.dtype.type(lr) * v
        return out


@dataclass
class Adam:
    """Adam with bias correction and L2 weight decay folded into the gradient."""

    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(
        self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float
    ) -> dict[str, np.ndarray]:
        self.step_count += 1
        t = self.step_count
        out = {}
        for name, p in params.items():
            dt = p.dtype.type
            g = grads[name].astype(p.dtype, copy=False)
            if self.weight_decay:
                g = g + dt(self.weight_decay) * p
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = dt(self.beta1) * m + dt(1 - self.beta1) * g
            v = dt(self.beta2) * v + dt(1 - self.beta2) * (g * g)
            self.m[name], self.v[name] = m, v
            mhat = m / dt(1 - self.beta1**t)
            vhat = v / dt(1 - self.beta2**t)
            out[name] = p - dt(lr) * mhat / (np.sqrt(vhat) + dt(self.epsilon))
        return out
