"""Central finite differences, used as an independent check on the tape."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> np.ndarray:
    """Estimate d f(x) / dx elementwise as ``(f(x + h) - f(x - h)) / 2h``.

    ``x.data`` is perturbed in place and restored afterwards, so ``f`` may
    close over ``x`` (e.g. a network parameter).
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    flat = x.data.reshape(-1)
    out = np.empty(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(f(x).data)
        flat[i] = orig - h
        down = float(f(x).data)
        flat[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return out.reshape(x.shape)


def grad_mismatch(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-4, rtol: float = 1e-2) -> np.ndarray:
    """Boolean mask of elements where ``|a - n| > max(atol, rtol * |n|)``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) > np.maximum(atol, rtol * np.abs(numeric))
