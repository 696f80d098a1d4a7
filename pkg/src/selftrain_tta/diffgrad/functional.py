"""Named wrappers around the primitives plus a few composites built from them."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .engine import Tensor, apply_primitive


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", [a, b])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("sub", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("mul", [a, b])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", [a, b])


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    out = apply_primitive("conv2d", [x, w], stride=stride, padding=padding)
    if b is not None:
        out = out + reshape(b, (1, -1, 1, 1))
    return out


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    return apply_primitive("maxpool2d", [x], k=k)


def global_avg_pool(x: Tensor) -> Tensor:
    return apply_primitive("global_avg_pool", [x])


def relu(x: Tensor) -> Tensor:
    return apply_primitive("relu", [x])


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return apply_primitive("softmax", [x], axis=axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return apply_primitive("log_softmax", [x], axis=axis)


def exp(x: Tensor) -> Tensor:
    return apply_primitive("exp", [x])


def log(x: Tensor) -> Tensor:
    return apply_primitive("log", [x])


def square(x: Tensor) -> Tensor:
    return apply_primitive("square", [x])


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return apply_primitive("sum", [x], axis=axis, keepdims=keepdims)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return apply_primitive("mean", [x], axis=axis, keepdims=keepdims)


def l2_norm_sq(x: Tensor, axis: int = -1) -> Tensor:
    return apply_primitive("l2_norm_sq", [x], axis=axis)


def gather(x: Tensor, index, axis: int = 0) -> Tensor:
    return apply_primitive("gather", [x], index=np.asarray(index, dtype=np.intp), axis=axis)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply_primitive("concat", list(xs), axis=axis)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return apply_primitive("reshape", [x], shape=tuple(shape))


# ---- composites ---------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return out + b if b is not None else out


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    """Axis permutation expressed as a flat gather followed by a reshape."""
    src = np.arange(x.data.size).reshape(x.shape).transpose(axes)
    flat = reshape(x, (x.data.size,))
    return reshape(gather(flat, src.ravel(), axis=0), src.shape)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function as the first entry of a two-way softmax against zero."""
    stacked = concat([reshape(x, x.shape + (1,)),
                      Tensor._wrap(np.zeros(x.shape + (1,), dtype=x.dtype))], axis=-1)
    return reshape(gather(softmax(stacked, axis=-1), [0], axis=-1), x.shape)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` along the last axis."""
    logp = log_softmax(logits, axis=-1)
    c = logits.shape[-1]
    labels = np.asarray(labels).reshape(-1)
    flat = reshape(logp, (labels.size * c,))
    picked = gather(flat, np.arange(labels.size) * c + labels, axis=0)
    return -mean(picked)


def entropy(logits: Tensor, axis: int = -1) -> Tensor:
    """Per-unit Shannon entropy (nats) of softmax(logits) along ``axis``."""
    return -sum(softmax(logits, axis=axis) * log_softmax(logits, axis=axis), axis=axis)


def kl_div(target_probs: np.ndarray, logits: Tensor, axis: int = -1) -> Tensor:
    """Per-unit KL(target || softmax(logits)); the target carries no gradient."""
    p = np.asarray(target_probs, dtype=logits.dtype)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    const = Tensor._wrap(plogp.sum(axis=axis).astype(logits.dtype))
    cross = sum(Tensor._wrap(p) * log_softmax(logits, axis=axis), axis=axis)
    return const - cross
