"""Adam over flat parameter buffers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ParamVector

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ParamVector) -> "AdamState":
        return cls(np.zeros_like(params.flat), np.zeros_like(params.flat), 0)


def adam_step(params: ParamVector, grads: ParamVector, state: AdamState, lr: float) -> tuple[ParamVector, AdamState]:
    if not params.same_shape(grads) or state.m.shape != params.flat.shape:
        raise ValueError("params, grads and optimizer state must share a shape")
    g = grads.flat
    t = state.t + 1
    m = BETA1 * state.m
    m += (1.0 - BETA1) * g
    v = np.multiply(g, g)
    v *= 1.0 - BETA2
    v += BETA2 * state.v
    # m_hat / (sqrt(v_hat) + eps), written with in-place buffers
    denom = v / (1.0 - BETA2**t)
    np.sqrt(denom, out=denom)
    denom += EPS
    step = m / denom
    step *= lr / (1.0 - BETA1**t)
    return ParamVector(params.layout, params.flat - step), AdamState(m, v, t)
