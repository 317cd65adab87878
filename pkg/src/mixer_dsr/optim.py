"""AdaBelief: Adam with the second moment tracking the gradient's deviation from its EMA."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["OptimizerState", "adabelief_step"]


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    s: list[np.ndarray]
    step: int = 0  # shared by every array in the group

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls([np.zeros_like(p, dtype=np.float64) for p in params],
                   [np.zeros_like(p, dtype=np.float64) for p in params], 0)

    def copy(self) -> "OptimizerState":
        return OptimizerState([a.copy() for a in self.m], [a.copy() for a in self.s], self.step)


def adabelief_step(
    state: OptimizerState,
    params,
    grads,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-16,
) -> tuple[list[np.ndarray], OptimizerState]:
    """One bias-corrected AdaBelief update; returns new arrays and a new state.

    ``s`` accumulates ``(g - m)**2`` with the freshly updated ``m`` and adds
    ``eps`` every step, as in the reference implementation.
    """
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError("params, grads and optimizer state must have the same length")
    t = state.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_params, new_m, new_s = [], [], []
    for p, g, m, s in zip(params, grads, state.m, state.s):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {m.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        s = beta2 * s + (1.0 - beta2) * (g - m) ** 2 + eps
        new_params.append(p - lr * (m / c1) / (np.sqrt(s / c2) + eps))
        new_m.append(m)
        new_s.append(s)
    return new_params, OptimizerState(new_m, new_s, t)
