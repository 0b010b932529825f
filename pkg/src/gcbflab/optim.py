"""Adam with bias correction, operating on lists of numpy arrays."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import NonFiniteError, ShapeError


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0, lr, beta1, beta2, eps)


def adam_update(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState):
    """One bias-corrected Adam step.  Returns ``(new_params, new_state)``; inputs are not mutated."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and moments must have equal length")
    if state.step < 0:
        raise ValueError("Adam step counter must be non-negative")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"parameter {p.shape} / gradient {g.shape} / moment {m.shape} mismatch")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient passed to Adam")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        mhat, vhat = m / c1, v / c2
        new_p.append(p - state.lr * mhat / (np.sqrt(vhat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)
