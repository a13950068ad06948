"""Shared test oracles: central finite differences and a naive conv loop."""

import numpy as np


def finite_difference(fn, x, step=1e-5, indices=None):
    """Central finite-difference gradient of scalar fn at x (float64).

    ``indices`` limits the probe to a subset of flat positions; the
    returned array is dense with zeros elsewhere in that case.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        orig = flat[i]
        flat[i] = orig + step
        plus = fn(x)
        flat[i] = orig - step
        minus = fn(x)
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * step)
    return grad


def max_relative_error(analytic, numeric, indices=None, floor=1e-6):
    """max |a - n| / max(|a|, |n|, floor) over the probed entries."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if indices is not None:
        a = a[list(indices)]
        n = n[list(indices)]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def conv2d_loop(x, weight, bias):
    """Six-nested-loop valid cross-correlation, the brute-force oracle."""
    b, c, h, w = x.shape
    k, _, kh, kw = weight.shape
    oh, ow = h - kh + 1, w - kw + 1
    out = np.zeros((b, k, oh, ow), dtype=np.float64)
    for bi in range(b):
        for ki in range(k):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += x[bi, ci, i + u, j + v] * weight[ki, ci, u, v]
                    out[bi, ki, i, j] = acc + bias[ki]
    return out
