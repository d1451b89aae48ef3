"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

DEFAULT_STEP = 1e-4
DEFAULT_FLOOR = 1e-8


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = DEFAULT_STEP,
                       mask: np.ndarray | None = None) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (any shape), entry by entry.

    Entries where ``mask`` is False are left at zero and not probed.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    probe = np.ones(flat.size, dtype=bool) if mask is None else np.broadcast_to(mask, x.shape).reshape(-1)
    for k in np.flatnonzero(probe):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(x)
        flat[k] = orig - h
        fm = f(x)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DEFAULT_FLOOR) -> float:
    """Largest |a - n| / max(|a|, |n|) over components where max(|a|, |n|) > ``floor``."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(a), np.abs(n))
    sel = scale > floor
    if not np.any(sel):
        return 0.0
    return float(np.max(np.abs(a - n)[sel] / scale[sel]))
