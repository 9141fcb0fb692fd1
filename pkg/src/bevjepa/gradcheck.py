"""Central finite-difference gradient verification.

Used by the test suite and by the ``gradcheck`` CLI subcommand. ``fn`` maps a
list of float64 arrays to a scalar; the check compares its analytic gradient
(from a fresh tape per evaluation) against central differences.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np


def numeric_grad(
    fn: Callable[[Sequence[np.ndarray]], float],
    arrays: Sequence[np.ndarray],
    h: float = 1e-5,
) -> list[np.ndarray]:
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = g.reshape(-1)
        base = [x.copy() for x in arrays]
        for j in range(a.size):
            orig = base[i].reshape(-1)[j]
            base[i].reshape(-1)[j] = orig + h
            fp = fn(base)
            base[i].reshape(-1)[j] = orig - h
            fm = fn(base)
            base[i].reshape(-1)[j] = orig
            flat[j] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def grad_errors(
    analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]
) -> tuple[float, float]:
    """Return (max relative error on |numeric|>=1e-6, max abs error elsewhere)."""
    max_rel = 0.0
    max_abs = 0.0
    for a, n in zip(analytic, numeric):
        diff = np.abs(a - n)
        big = np.abs(n) >= 1e-6
        if big.any():
            max_rel = max(max_rel, float((diff[big] / np.abs(n[big])).max()))
        if (~big).any():
            max_abs = max(max_abs, float(diff[~big].max()))
    return max_rel, max_abs


def check_gradients(
    fn: Callable[[Sequence[np.ndarray]], float],
    grad_fn: Callable[[Sequence[np.ndarray]], Sequence[np.ndarray]],
    arrays: Sequence[np.ndarray],
    rel_tol: float = 1e-4,
    abs_tol: float = 1e-7,
    h: float = 1e-5,
) -> tuple[bool, float, float]:
    analytic = grad_fn(arrays)
    numeric = numeric_grad(fn, arrays, h=h)
    max_rel, max_abs = grad_errors(analytic, numeric)
    return (max_rel < rel_tol and max_abs < abs_tol), max_rel, max_abs
