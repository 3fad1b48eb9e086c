"""Independent reference computations used by the test suite."""

from __future__ import annotations

import numpy as np


def grid_iou(a, b, lo=0.0, hi=10.0, res=1e-3):
    """IoU by counting grid cells of width `res` covered by each interval."""
    centers = lo + (np.arange(int(round((hi - lo) / res))) + 0.5) * res
    in_a = (centers >= a[0]) & (centers < a[1])
    in_b = (centers >= b[0]) & (centers < b[1])
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(in_a & in_b) / union


def central_difference(f, x: np.ndarray, idx, h=1e-5) -> float:
    orig = x[idx]
    x[idx] = orig + h
    fp = f()
    x[idx] = orig - h
    fm = f()
    x[idx] = orig
    return (fp - fm) / (2 * h)
