from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .tensor import Tensor


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    h: float = 1e-5,
    n_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences.

    For each checked coordinate i the error is
    ``|analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8)``.
    ``n_coords`` restricts the check to a seeded random subset of coordinates,
    which keeps large parameter tensors affordable.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    out.backward()
    analytic = probe.grad.reshape(-1)

    flat = base.reshape(-1)
    coords = np.arange(flat.size)
    if n_coords is not None and n_coords < flat.size:
        coords = np.sort(np.random.default_rng(seed).choice(flat.size, size=n_coords, replace=False))

    worst = 0.0
    for i in coords:
        plus = flat.copy()
        plus[i] += h
        minus = flat.copy()
        minus[i] -= h
        f_plus = f(Tensor(plus.reshape(base.shape))).item()
        f_minus = f(Tensor(minus.reshape(base.shape))).item()
        numeric = (f_plus - f_minus) / (2.0 * h)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
