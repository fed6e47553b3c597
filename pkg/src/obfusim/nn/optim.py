"""Plain SGD with momentum and global-norm gradient clipping."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .layers import Param


def global_grad_norm(params: Sequence[Param]) -> float:
    total = 0.0
    for p in params:
        total += float(np.sum(p.grad ** 2))
    return float(np.sqrt(total))


def clip_gradients(params: Sequence[Param], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the scale factor applied (1.0 when no clipping happened).
    """
    norm = global_grad_norm(params)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for p in params:
        p.grad *= scale
    return scale


class SgdOptimizer:
    """SGD update with optional momentum, applied after gradient clipping.

    Args:
        params: parameters to update; gradients are zeroed after each step.
        lr: learning rate, must be positive.
        momentum: momentum coefficient; 0.0 gives plain SGD.
        clip_norm: global gradient-norm ceiling applied before the update,
            or None to disable clipping.
    """

    def __init__(self, params: Sequence[Param], lr: float, momentum: float = 0.9,
                 clip_norm: float | None = 5.0) -> None:
        if lr <= 0.0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        if clip_norm is not None and clip_norm <= 0.0:
            raise ValueError(f"clip_norm must be positive, got {clip_norm}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        norm = global_grad_norm(self.params)
        if self.clip_norm is not None:
            clip_gradients(self.params, self.clip_norm)
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            p.value -= self.lr * v
        self.zero_grad()
        return norm

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
