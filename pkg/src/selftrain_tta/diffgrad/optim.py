from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .engine import NonFiniteError, Tensor


class MissingGradError(RuntimeError):
    pass


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update; clears grads afterwards.

    Parameter arrays are replaced, never written in place.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise MissingGradError(f"no gradient for parameters: {', '.join(missing)}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    updates = {}
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        if m.shape != p.shape:
            raise ValueError(f"Adam moment shape {m.shape} does not match parameter {name} {p.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        with np.errstate(invalid="ignore", over="ignore"):
            new = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if not np.all(np.isfinite(new)):
            raise NonFiniteError("adam_step", f"update for {name}")
        updates[name] = (new.astype(p.dtype), m.astype(p.dtype), v.astype(p.dtype))
    for name, (new, m, v) in updates.items():
        params[name].data = new
        params[name].grad = None
        state.m[name] = m
        state.v[name] = v
    state.t = t
