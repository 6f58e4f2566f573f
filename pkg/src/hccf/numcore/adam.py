"""Adam with bias-corrected moment estimates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, DimensionError


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **kwargs):
        shapes = [_value(p).shape for p in params]
        return cls(m=[np.zeros(s) for s in shapes], v=[np.zeros(s) for s in shapes], **kwargs)


def _value(p):
    return p.value if hasattr(p, "value") else p


def adam_step(params, grads, state: AdamState, lr: float):
    """Apply one Adam update in place and return ``(params, state)``.

    ``params`` holds Tensors or arrays; a ``None`` gradient counts as zero.
    """
    if lr < 0:
        raise ContractError("learning rate must be nonnegative")
    if not state.m:
        fresh = AdamState.for_params(params, beta1=state.beta1, beta2=state.beta2, eps=state.eps)
        state.m, state.v = fresh.m, fresh.v
    if not (len(params) == len(grads) == len(state.m)):
        raise DimensionError("params, grads and optimizer state differ in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, (p, g) in enumerate(zip(params, grads)):
        value = _value(p)
        g = np.zeros_like(value) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != value.shape or state.m[k].shape != value.shape:
            raise DimensionError(f"adam: gradient shape {g.shape} vs parameter {value.shape}")
        m = state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1.0 - b2) * (g * g)
        value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
