"""Adam with bias correction, written as a pure update over lists of arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(
            step=0,
            m=[np.zeros_like(p, dtype=np.float64) for p in params],
            v=[np.zeros_like(p, dtype=np.float64) for p in params],
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(
    params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float
) -> tuple[list[np.ndarray], AdamState]:
    """One Adam update. Inputs are not modified; new arrays and a new state are returned."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError(
            f"adam_step: {len(params)} params, {len(grads)} grads, {len(state.m)} moment tensors"
        )
    for i, (p, g, m) in enumerate(zip(params, grads, state.m)):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"adam_step: param {i} shape {p.shape}, grad {g.shape}, moment {m.shape}")

    b1, b2 = state.beta1, state.beta2
    t = state.step + 1
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p.append(p - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(t, new_m, new_v, b1, b2, state.eps)
