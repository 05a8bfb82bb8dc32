"""Central finite differences, independent of the tape."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor


def finite_difference_grads(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-3,
    extrapolate: bool = True,
) -> dict[str, np.ndarray]:
    """d(loss)/d(param) by perturbing each scalar of each parameter in place.

    By default central differences at ``h`` and ``h/2`` are combined by
    Richardson extrapolation, which cancels the O(h^2) truncation term while
    never probing further than ``h`` from the point. ``extrapolate=False``
    gives the plain two-point difference.
    ``loss_fn`` must evaluate the loss from the current parameter values
    without recording a tape; use float64 parameters for a meaningful result.
    """

    def at(flat, i, x):
        flat[i] = x
        return float(loss_fn().data)

    out = {}
    for name, p in params.items():
        grad = np.zeros_like(p.data, dtype=np.float64)
        flat = p.data.reshape(-1)
        g = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            up, down = at(flat, i, orig + h), at(flat, i, orig - h)
            coarse = (up - down) / (2 * h)
            if extrapolate:
                fine = (at(flat, i, orig + h / 2) - at(flat, i, orig - h / 2)) / h
                g[i] = (4 * fine - coarse) / 3
            else:
                g[i] = coarse
            flat[i] = orig
        out[name] = grad
    return out


def max_relative_error(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray], floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over every parameter entry."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        a = np.asarray(a, dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)) if a.size else 0.0)
    return worst
