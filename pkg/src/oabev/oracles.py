"""Slow, obviously-correct reference implementations used by ``verify`` and the tests."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from .depth_bins import ACTIVATION_THRESHOLD, LidBinning


def boundary_scan_bin(depth: float, binning: LidBinning) -> int:
    """Walk the boundaries upward until the next one exceeds ``depth``."""
    l = 0
    while l < binning.K - 1 and depth >= binning.boundary(l + 1):
        l += 1
    return l


def enumerate_decode(probs: NDArray, K: int) -> int:
    """Count activated bins of one pixel with an explicit loop."""
    n = 0
    for k in range(K):
        if probs[k, 0] > ACTIVATION_THRESHOLD:
            n += 1
    return min(n, K - 1)


def dense_conv3d(dense: NDArray, weight: NDArray, bias: NDArray, stride: int) -> NDArray[np.float64]:
    """3x3x3 convolution with zero padding 1: ``out[o] = b + sum_k W[k] x[stride*o + k]``."""
    nx, ny, nz, _ = dense.shape
    shape = tuple(math.ceil(n / stride) for n in (nx, ny, nz))
    padded = np.pad(dense, ((1, 1), (1, 1), (1, 1), (0, 0)))
    out = np.tile(bias, shape + (1,)).astype(np.float64)
    for a in range(3):
        for b in range(3):
            for c in range(3):
                win = padded[a : a + stride * shape[0] : stride, b : b + stride * shape[1] : stride,
                             c : c + stride * shape[2] : stride]
                out += win @ weight[a, b, c]
    return out


def dense_active(active: NDArray[np.bool_], stride: int, submanifold: bool) -> NDArray[np.bool_]:
    """Output sites of a sparse layer: the input sites, or every window touching one."""
    if submanifold:
        return active.copy()
    w = np.zeros((3, 3, 3, 1, 1))
    w[...] = 1.0
    hits = dense_conv3d(active[..., None].astype(np.float64), w, np.zeros(1), stride)[..., 0]
    return hits > 0


def bilinear_loop(values: NDArray, a: float, b: float) -> NDArray[np.float64]:
    """Bilinear sample with explicit corner weights; neighbors outside the map count as zero."""
    A, B, C = values.shape
    a0, b0 = math.floor(a), math.floor(b)
    out = np.zeros(C)
    for da in (0, 1):
        for db in (0, 1):
            i, j = a0 + da, b0 + db
            wa = (a - a0) if da else (1.0 - (a - a0))
            wb = (b - b0) if db else (1.0 - (b - b0))
            if 0 <= i < A and 0 <= j < B:
                out = out + wa * wb * values[i, j]
    return out


def central_difference(f: Callable[[NDArray], float], x: NDArray, step: float = 1e-5) -> NDArray[np.float64]:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return g


def relative_error(analytic: NDArray, numeric: NDArray, floor: float = 1e-8) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))
