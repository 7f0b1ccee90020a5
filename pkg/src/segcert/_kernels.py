"""Compiled per-pixel reductions over class-major logit buffers."""
import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def top2_scan(flat):
    """Single pass over a (K, N) buffer.

    Returns (argmax, top1, margin, all_finite). argmax keeps the lowest class
    index on ties; top1 and margin are float64.
    """
    n_classes, n = flat.shape
    best = flat[0].copy()
    second = np.full(n, -np.inf, dtype=flat.dtype)
    arg = np.zeros(n, dtype=np.int32)
    finite = True
    for i in range(n):
        if not np.isfinite(best[i]):
            finite = False
    for k in range(1, n_classes):
        row = flat[k]
        for i in range(n):
            v = row[i]
            if v > best[i]:
                second[i] = best[i]
                best[i] = v
                arg[i] = k
            elif v > second[i]:
                second[i] = v
            if not np.isfinite(v):
                finite = False
    top1 = best.astype(np.float64)
    margin = top1 - second.astype(np.float64)
    return arg, top1, margin, finite
