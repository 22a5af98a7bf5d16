from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericsError, Tensor


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Tensor], **kwargs) -> AdamState:
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **kwargs,
        )


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    A missing gradient is treated as zero.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise NumericsError("adam_step: params, grads and state disagree in length")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise NumericsError(f"adam_step: gradient shape {g.shape} != parameter shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        p.data -= update.astype(p.data.dtype)
    return state
