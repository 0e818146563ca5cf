"""First-order optimizers updating parameter tensors in place."""
from __future__ import annotations

import logging
from typing import Iterable

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)


class Optimizer:
    def __init__(self, params: Iterable[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr
        self.rejected_steps = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _grads(self) -> list[np.ndarray] | None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        for p, g in zip(self.params, grads):
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.data.shape}")
            if not np.all(np.isfinite(g)):
                self.rejected_steps += 1
                log.warning("optimizer step rejected: non-finite gradient (parameter shape %s)", p.data.shape)
                return None
        return grads

    def step(self) -> bool:
        """Apply one update; returns False (parameters untouched) if any gradient is non-finite."""
        grads = self._grads()
        if grads is None:
            return False
        self._update(grads)
        return True

    def _update(self, grads: list[np.ndarray]) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, params, lr: float = 0.01, momentum: float = 0.0, weight_decay: float = 0.0):
        super().__init__(params, lr)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def _update(self, grads):
        for p, g, v in zip(self.params, grads, self.velocity):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v *= self.momentum
                v += g
                g = v
            p.data -= self.lr * g


class Adam(Optimizer):
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        super().__init__(params, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _update(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(params, kind: str = "adam", lr: float = 1e-3, momentum: float = 0.9,
                   weight_decay: float = 0.0) -> Optimizer:
    if kind == "sgd":
        return SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    if kind == "adam":
        return Adam(params, lr=lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")


def optimizer_step(params, grads, hyper: dict) -> bool:
    """One-off update of ``params`` from explicit ``grads`` (stateless SGD without momentum)."""
    params = list(params)
    for p, g in zip(params, grads):
        p.grad = np.asarray(g, dtype=p.data.dtype)
    opt = make_optimizer(params, hyper.get("kind", "sgd"), lr=hyper.get("lr", 0.01),
                         momentum=hyper.get("momentum", 0.0))
    return opt.step()
