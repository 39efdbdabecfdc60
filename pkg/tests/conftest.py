"""Shared test helpers: unit-norm stacks and the finite-difference oracle."""

import numpy as np


def unit_rows(rng, n, dim):
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def max_rel_err(analytic, numeric, floor=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def finite_difference(fn, arr, h=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``arr``,
    mutating and restoring in place."""
    grad = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + h
        f_plus = fn()
        arr[idx] = orig - h
        f_minus = fn()
        arr[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * h)
    return grad


def fd_gradcheck(fn, arrays, grads, h=1e-5, floor=1e-6):
    """Worst relative error between analytic grads and central differences."""
    worst = 0.0
    for arr, g in zip(arrays, grads):
        fd = finite_difference(fn, arr, h=h)
        worst = max(worst, max_rel_err(g, fd, floor=floor))
    return worst
