"""Central finite-difference checks for the autodiff engine."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(loss_fn: Callable[[], float], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn()`` with respect to every entry of ``tensor``."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)  # view: edits land in tensor.data
    out = grad.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        up = loss_fn()
        flat[k] = old - h
        down = loss_fn()
        flat[k] = old
        out[k] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max|n|``, the inf-norm relative error of the whole array."""
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(build_loss: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst relative error over ``tensors`` between backprop and central differences."""
    for t in tensors:
        t.grad = None
    build_loss().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    for t, a in zip(tensors, analytic):
        n = numeric_grad(lambda: build_loss().item(), t, h)
        worst = max(worst, relative_error(a, n))
    return worst
