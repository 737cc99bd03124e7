"""Central finite differences, used as the independent oracle for every backward pass."""
from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import ConfigurationError, OracleError


def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Return ``(f(x + h e_i) - f(x - h e_i)) / 2h`` for every element ``i`` of ``x``."""
    if h <= 0:
        raise ConfigurationError("finite-difference step must be positive")
    x = np.array(x, dtype=np.float64 if np.asarray(x).dtype.kind != "f" else np.asarray(x).dtype)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"f is non-finite near element {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """max |a - n| scaled by the largest gradient magnitude of either side.

    Scaling by the global magnitude (not per element) keeps exact zeros, such as
    dead ReLU units, from turning O(h^2) noise into large relative errors.
    """
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    if not a.size:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), floor)
    return float(np.abs(a - n).max() / scale)
