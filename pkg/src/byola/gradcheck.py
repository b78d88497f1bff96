"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(f: Callable[[], float], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``param.data``."""
    grad = np.zeros_like(param.data, dtype=np.float64)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = f()
        flat[i] = orig - h
        minus = f()
        flat[i] = orig
        out[i] = (plus - minus) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """``||a - n|| / max(||a|| + ||n||, floor)`` over a whole tensor.

    The floor keeps identically-zero gradients (e.g. a bias feeding straight
    into BatchNorm) from turning finite-difference round-off, around 1e-10
    for O(10) losses at h=1e-5, into a failure.
    """
    diff = np.linalg.norm(np.asarray(analytic, np.float64) - numeric)
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return float(diff / max(scale, floor))


def gradcheck(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
              h: float = 1e-5) -> float:
    """Worst relative error between backprop and finite differences.

    ``loss_fn`` must rebuild the graph on every call and be deterministic.
    Parameters should be float64.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        n = numerical_grad(lambda: loss_fn().item(), p, h)
        worst = max(worst, relative_error(a, n))
    return worst
