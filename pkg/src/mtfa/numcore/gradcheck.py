"""Central-difference gradient checking against the tape's analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-3,
    seed: int = 0,
) -> float:
    """Return the worst relative error between analytic and numeric gradients.

    ``fn(*inputs)`` must be deterministic. Its output is reduced to a scalar by
    a fixed random projection, so every output element contributes. Each
    element of every input with ``requires_grad`` is perturbed by ``+-h`` and
    compared through ``|a - n| / max(1, |a|, |n|)``.
    """
    probe = fn(*inputs)
    proj = np.random.default_rng(seed).standard_normal(probe.shape)

    for t in inputs:
        if t.requires_grad:
            t.grad = np.zeros_like(t.data)
    with Tape() as tape:
        out = fn(*inputs)
    tape.backward(out, proj)

    def scalar() -> float:
        return float(np.sum(fn(*inputs).data * proj))

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        analytic = t.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = scalar()
            flat[i] = orig - h
            down = scalar()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            a = float(analytic[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst
