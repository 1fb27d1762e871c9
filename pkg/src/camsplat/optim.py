"""Adam with decoupled weight decay, plus the cosine learning-rate ramp.

State lives in float32 numpy arrays keyed by parameter name, so two runs
from the same seed produce byte-identical parameters.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ContractError
from .numerics import Tensor


class Adam:
    """First/second-moment adaptive step on a named parameter dict.

    Weight decay is decoupled (applied directly to the weights, not mixed
    into the gradient moments). Parameters without an accumulated ``grad``
    are skipped, which is how frozen branches stay frozen.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple = (0.9, 0.95), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        if not params:
            raise ContractError("optimizer needs at least one parameter")
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        lr = np.float32(self.lr)
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += np.float32(1.0 - b1) * g
            v *= b2
            v += np.float32(1.0 - b2) * (g * g)
            if self.weight_decay:
                p.data -= lr * np.float32(self.weight_decay) * p.data
            denom = np.sqrt(v / np.float32(bc2)) + np.float32(self.eps)
            p.data -= lr * (m / np.float32(bc1)) / denom

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class CosineSchedule:
    """Linear warmup to ``peak``, then cosine decay to ``floor``."""

    def __init__(self, peak: float, total_steps: int, warmup: int = 0,
                 floor: float = 0.0):
        if total_steps < 1:
            raise ContractError("schedule needs total_steps >= 1")
        if warmup >= total_steps:
            raise ContractError("warmup must be shorter than total_steps")
        self.peak = float(peak)
        self.total = int(total_steps)
        self.warmup = int(warmup)
        self.floor = float(floor)

    def __call__(self, step: int) -> float:
        if step < self.warmup:
            return self.peak * (step + 1) / self.warmup
        frac = (step - self.warmup) / max(1, self.total - self.warmup)
        frac = min(1.0, frac)
        return self.floor + (self.peak - self.floor) * 0.5 * (1.0 + math.cos(math.pi * frac))
