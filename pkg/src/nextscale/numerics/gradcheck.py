"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def numerical_grad(fn: Callable[[], Tensor], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """d fn() / d x by central differences; ``fn`` must read ``x.data`` afresh."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(fn().data.sum())
            flat[i] = orig - step
            down = float(fn().data.sum())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    num = np.abs(analytic - numeric).max(initial=0.0)
    den = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(num / den)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Worst relative error between backward() and finite differences over ``inputs``.

    ``fn`` builds a fresh graph each call; non-scalar outputs are summed.
    """
    for x in inputs:
        x.grad = None
    out = fn()
    if out.size != 1:
        out = out.sum()
    out.backward()
    worst = 0.0
    for x in inputs:
        numeric = numerical_grad(fn, x, step)
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
