from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .engine import NonFiniteError, Tensor, backward, no_grad, precision


def _analytic(f: Callable[..., Tensor], leaves: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    for t in leaves.values():
        t.grad = None
        t.requires_grad = True
    loss = f()
    if not np.isfinite(loss.data):
        raise NonFiniteError("grad_check", "f(x) is not finite")
    backward(loss)
    out = {}
    for name, t in leaves.items():
        out[name] = np.zeros_like(t.data, dtype=np.float64) if t.grad is None else t.grad.astype(np.float64)
        t.grad = None
    return out


def grad_check_params(f: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-6,
                      max_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between backward and central differences over ``params``.

    ``f`` closes over the tensors in ``params``. The analytic gradient is taken
    in the tensors' own dtype; the finite-difference oracle always runs in
    float64 on a promoted copy so a float32 backward is judged against an
    accurate reference. ``max_coords`` subsamples coordinates per tensor.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    analytic = _analytic(f, params)
    rng = np.random.default_rng(seed)
    originals = {name: t.data for name, t in params.items()}
    worst = 0.0
    try:
        for t in params.values():
            t.data = t.data.astype(np.float64)
        with precision(np.float64), no_grad():
            for name, t in params.items():
                base = t.data
                coords = np.arange(base.size)
                if max_coords is not None and base.size > max_coords:
                    coords = rng.choice(base.size, size=max_coords, replace=False)
                for c in coords:
                    bumped = base.copy().reshape(-1)
                    bumped[c] += eps
                    t.data = bumped.reshape(base.shape)
                    hi = f().data
                    bumped[c] -= 2 * eps
                    t.data = bumped.reshape(base.shape)
                    lo = f().data
                    if not (np.isfinite(hi) and np.isfinite(lo)):
                        raise NonFiniteError("grad_check", "f(x) is not finite")
                    numeric = (float(hi) - float(lo)) / (2 * eps)
                    a = float(analytic[name].reshape(-1)[c])
                    worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
                t.data = base
    finally:
        for name, t in params.items():
            t.data = originals[name]
    return worst


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    leaf = Tensor(x.data, requires_grad=True, dtype=x.dtype)
    return grad_check_params(lambda: f(leaf), {"x": leaf}, eps=eps)
