"""Central finite-difference oracle for checking backward rules."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


def numerical_gradient(f: Callable[[], Tensor], t: Tensor, step: float = 1e-5,
                       indices=None) -> np.ndarray:
    """d f / d t by central differences, evaluated with no tape active.

    ``indices`` restricts the probe to a subset of flat positions; the other
    entries of the result are left at zero.
    """
    flat = t.data.reshape(-1)
    grad = np.zeros_like(flat)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        orig = flat[i]
        flat[i] = orig + step
        up = float(f().data.sum())
        flat[i] = orig - step
        down = float(f().data.sum())
        flat[i] = orig
        grad[i] = (up - down) / (2 * step)
    return grad.reshape(t.shape)


def analytic_gradient(f: Callable[[], Tensor], wrt: Sequence[Tensor]) -> list:
    with Tape() as tape:
        out = f()
    g = backward(tape, out, wrt)
    return [g[t] for t in wrt]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation scaled by the largest gradient magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(f: Callable[[], Tensor], wrt: Sequence[Tensor], step: float = 1e-5,
                    indices=None) -> float:
    """Worst relative error across ``wrt``; all tensors should be float64."""
    worst = 0.0
    analytic = analytic_gradient(f, wrt)
    for t, a in zip(wrt, analytic):
        idx = None if indices is None else indices.get(t)
        n = numerical_gradient(f, t, step, idx)
        if idx is not None:
            a = a.reshape(-1)[list(idx)]
            n = n.reshape(-1)[list(idx)]
        worst = max(worst, relative_error(a, n))
    return worst
