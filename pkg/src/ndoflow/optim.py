"""First-order optimizers and learning-rate schedules.

Optimizers hold the parameter list and per-slot state; ``step`` reads the
adjoints left by the last backward sweep and writes fresh arrays into the
parameter tensors (never in place, so earlier tapes stay valid). Gradients
must be finite; a NaN/Inf grad aborts the step with an error instead of
poisoning the state.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autodiff import AutodiffError, Tensor, grad_of


class Optimizer:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = float(lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _grads(self) -> list[np.ndarray]:
        gs = []
        for p in self.params:
            g = grad_of(p)
            if not np.all(np.isfinite(g)):
                raise AutodiffError("non-finite gradient reached the optimizer")
            gs.append(g)
        return gs

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def step(self) -> None:
        for p, g in zip(self.params, self._grads()):
            p.data = p.data - self.lr * g


class RMSprop(Optimizer):
    """Running mean of squared grads; alpha and eps match the common
    torch defaults so published learning rates transfer unchanged."""

    def __init__(self, params, lr: float, alpha: float = 0.99, eps: float = 1e-8):
        super().__init__(params, lr)
        self.alpha = alpha
        self.eps = eps
        self.sq = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for i, (p, g) in enumerate(zip(self.params, self._grads())):
            self.sq[i] = self.alpha * self.sq[i] + (1.0 - self.alpha) * g * g
            p.data = p.data - self.lr * g / (np.sqrt(self.sq[i]) + self.eps)


class Adam(Optimizer):
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, self._grads())):
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


class ExponentialLR:
    """lr(t) = lr0 * gamma^t, applied once per iteration."""

    def __init__(self, lr0: float, gamma: float):
        self.lr0 = float(lr0)
        self.gamma = float(gamma)

    def __call__(self, t: int) -> float:
        return self.lr0 * self.gamma ** t


class CosineAnnealingLR:
    """lr(t) = lr_min + 0.5 (lr_max - lr_min) (1 + cos(pi t / t_max))."""

    def __init__(self, lr_max: float, t_max: int, lr_min: float = 0.0):
        self.lr_max = float(lr_max)
        self.lr_min = float(lr_min)
        self.t_max = int(t_max)

    def __call__(self, t: int) -> float:
        frac = min(t, self.t_max) / self.t_max
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + math.cos(math.pi * frac))
