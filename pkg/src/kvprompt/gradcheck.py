"""Central finite-difference checks for the autodiff core."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-5) -> np.ndarray:
    """d fn() / d t by central differences, perturbing ``t.data`` in place."""
    grad = np.zeros(t.shape, dtype=np.float64)
    flat = t.data.reshape(-1)
    out = grad.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            hi = fn().item()
            flat[i] = old - eps
            lo = fn().item()
            flat[i] = old
            out[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(max|a|, max|n|); 0 when both vanish."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5) -> list[float]:
    """Relative error of backprop vs finite differences for each tensor in ``tensors``."""
    for t in tensors:
        t.grad = np.zeros_like(t.data)
    T.backward(fn())
    analytic = [t.grad.astype(np.float64).copy() for t in tensors]
    return [relative_error(a, numeric_grad(fn, t, eps)) for a, t in zip(analytic, tensors)]
