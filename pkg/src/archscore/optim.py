"""Momentum SGD with global gradient clipping, plus a plateau LR schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import Tensor, global_norm


def sgd_step(params: list[Tensor], grads: dict[int, np.ndarray], lr: float,
             momentum: float = 0.9, weight_decay: float = 0.0,
             grad_clip: Optional[float] = None,
             buffers: Optional[dict[int, np.ndarray]] = None) -> dict[int, np.ndarray]:
    """One SGD update over ``params`` with gradients keyed by ``id(param)``.

    The global gradient norm is clipped to ``grad_clip`` before weight
    decay joins as an L2 term and before the momentum update.  Returns the
    momentum buffer map (created on first use).
    """
    if not lr > 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if buffers is None:
        buffers = {}
    gs = [grads.get(id(p), np.zeros_like(p.data)) for p in params]
    if grad_clip is not None:
        norm = global_norm(gs)
        if norm > grad_clip:
            scale = grad_clip / norm
            gs = [g * scale for g in gs]
    for p, g in zip(params, gs):
        g = g.astype(p.dtype, copy=False)
        if weight_decay:
            g = g + weight_decay * p.data
        buf = buffers.get(id(p))
        if momentum:
            if buf is None:
                buf = np.zeros_like(p.data)
            buf = momentum * buf + g
            buffers[id(p)] = buf
            upd = buf
        else:
            upd = g
        p.data = p.data - lr * upd
    return buffers


@dataclass
class PlateauSchedule:
    """Halve the LR when the monitored quantity stops improving.

    Mirrors a reduce-on-plateau rule: ``factor`` decay after ``patience``
    epochs without a new best, with an absolute LR floor.
    """

    lr: float
    factor: float = 0.5
    patience: int = 30
    min_lr: float = 1e-5
    best: float = field(default=np.inf, init=False)
    stale: int = field(default=0, init=False)

    def step(self, metric: float) -> float:
        """Feed one epoch's monitored value; returns the LR to use next."""
        if metric < self.best:
            self.best = metric
            self.stale = 0
        else:
            self.stale += 1
            if self.stale > self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.stale = 0
        return self.lr

    @property
    def converged(self) -> bool:
        return self.lr <= self.min_lr
