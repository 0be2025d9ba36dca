"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}; step rejected")
        self.name = name


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict, grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """Update ``params`` (name -> Tensor or ndarray) in place.

    The whole step is rejected before any mutation if a gradient is non-finite.
    Parameters without an entry in ``grads`` are treated as having zero gradient.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        arr = p.data if hasattr(p, "data") and not isinstance(p, np.ndarray) else p
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(arr)
        if g.shape != arr.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {arr.shape} for {name!r}")
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(arr)
            state.second_moment[name] = np.zeros_like(arr)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        arr -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return state
