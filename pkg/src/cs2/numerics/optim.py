from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from ..errors import DivergenceError, ShapeError
from .tensor import Tensor


@dataclass
class OptimizerState:
    """Learning rate, moment buffers and step counter for one parameter set.

    ``mode`` is ``"adam"`` (adaptive moments) or ``"sgd"`` (plain gradient).
    """

    learning_rate: float = 2e-4
    mode: str = "adam"
    betas: tuple[float, float] = (0.5, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.mode not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer mode {self.mode!r}")


def optimizer_step(
    params: Mapping[str, Tensor],
    state: OptimizerState,
    grads: Optional[Mapping[str, np.ndarray]] = None,
) -> OptimizerState:
    """Update ``params`` in place from ``grads`` (default: each ``param.grad``).

    Every gradient is validated before any parameter moves, so a non-finite
    gradient leaves the whole set untouched.
    """
    if grads is None:
        grads = {name: p.grad if p.grad is not None else np.zeros_like(p.data) for name, p in params.items()}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}", step=state.step_count)

    state.step_count += 1
    lr = state.learning_rate
    if state.mode == "sgd":
        for name, p in params.items():
            p.data -= lr * grads[name]
        return state

    b1, b2 = state.betas
    t = state.step_count
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        p.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return state


def zero_grads(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()
