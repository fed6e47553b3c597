"""Finite-difference verification of hand-written gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .layers import Param


def grad_check(loss_fn: Callable[[], float], params: Sequence[Param],
               epsilon: float = 1e-4) -> float:
    """Compare analytic gradients with central finite differences.

    ``loss_fn`` must run a full forward pass, accumulate gradients into
    each param's ``.grad``, and return the scalar loss. It is called once
    to collect the analytic gradients and then twice per parameter entry
    for the numeric estimate, so keep the model tiny.

    Returns:
        The maximum relative error over all parameter entries, where the
        relative error of (analytic a, numeric n) is |a - n| / max(1e-6,
        |a|, |n|).
    """
    for p in params:
        p.zero_grad()
    loss_fn()
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.reshape(-1)
        a_flat = a.reshape(-1)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + epsilon
            loss_plus = loss_fn()
            flat[idx] = original - epsilon
            loss_minus = loss_fn()
            flat[idx] = original
            for q in params:
                q.zero_grad()
            numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
            denom = max(1e-6, abs(a_flat[idx]), abs(numeric))
            worst = max(worst, abs(a_flat[idx] - numeric) / denom)
    return float(worst)
