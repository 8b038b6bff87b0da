"""Central finite-difference checks against tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float) -> np.ndarray:
    out = np.zeros(t.shape, dtype=np.float64)
    flat = t.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn().data)
            flat[i] = orig - h
            down = float(fn().data)
            flat[i] = orig
            out.reshape(-1)[i] = (up - down) / (2.0 * h)
    return out


def max_relative_error(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float) -> float:
    """Largest |tape - numeric| over all checked entries, relative to the largest numeric entry.

    ``fn`` must rebuild the scalar loss from ``inputs`` on every call.
    """
    for t in inputs:
        t.grad = None
    backward(fn())
    analytic = np.concatenate([
        (t.grad if t.grad is not None else np.zeros(t.shape)).reshape(-1).astype(np.float64)
        for t in inputs
    ])
    numeric = np.concatenate([numerical_grad(fn, t, h).reshape(-1) for t in inputs])
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)
