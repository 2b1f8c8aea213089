"""Ordinal depth loss over foreground pixels and the weighted training objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigurationError, EmptyForegroundError, NumericError, ShapeError
from .foreground import DepthTargets, ForegroundMask

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 20.0
    beta: float = 4.0
    gamma: float = 1.0

    def __post_init__(self) -> None:
        w = (self.alpha, self.beta, self.gamma)
        if any(not math.isfinite(x) or x < 0 for x in w):
            raise ConfigurationError(f"loss weights must be finite and nonnegative, got {w}")
        if not any(w):
            raise ConfigurationError("loss weights cannot all be zero")


@dataclass(frozen=True)
class LossBreakdown:
    l_3d: float
    l_2d: float
    l_dep: float
    total: float
    n_foreground: int = 0


def ordinal_targets(bins: NDArray[np.int64], K: int) -> NDArray[np.float64]:
    """Indicator of channel 0 ("beyond bin k") for every bin: 1 where ``k < l``."""
    return (np.arange(K) < np.asarray(bins)[..., None]).astype(np.float64)


def ordinal_depth_loss(
    probs: NDArray, targets: DepthTargets, mask: ForegroundMask
) -> tuple[float, NDArray[np.float64]]:
    """Mean negative ordinal log-likelihood over foreground pixels.

    Returns the loss and its gradient w.r.t. the pre-softmax logits
    (same shape as ``probs``). Background pixels get exactly zero gradient.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 4 or p.shape[-1] != 2:
        raise ShapeError(f"probabilities must be (H, W, K, 2), got {p.shape}")
    if p.shape[:2] != mask.shape or targets.bins.shape != mask.shape:
        raise ShapeError("probabilities, targets and mask disagree on image size")
    sel = mask.flags
    N = int(np.count_nonzero(sel))
    if N == 0:
        raise EmptyForegroundError("no foreground pixels to supervise")
    K = p.shape[2]
    bins = targets.bins[sel]
    if np.any(bins < 0) or np.any(bins >= K):
        raise ShapeError("foreground pixel without a valid target bin")
    t = ordinal_targets(bins, K)  # (N, K)
    pf = p[sel]  # (N, K, 2)
    log_p0 = np.log(np.maximum(pf[..., 0], PROB_FLOOR))
    log_p1 = np.log(np.maximum(pf[..., 1], PROB_FLOOR))
    per_pixel = (t * log_p0 + (1.0 - t) * log_p1).sum(axis=1)
    loss = -math.fsum(per_pixel) / N
    grad = np.zeros_like(p)
    g = np.empty_like(pf)
    g[..., 0] = (pf[..., 0] - t) / N
    g[..., 1] = (pf[..., 1] - (1.0 - t)) / N
    grad[sel] = g
    return loss, grad


def combine_losses(l_3d: float, l_2d: float, l_dep: float, w: LossWeights, n_foreground: int = 0) -> LossBreakdown:
    vals = (l_3d, l_2d, l_dep)
    if not all(math.isfinite(v) for v in vals):
        raise NumericError(f"non-finite loss component in {vals}")
    total = w.alpha * l_3d + w.beta * l_2d + w.gamma * l_dep
    return LossBreakdown(float(l_3d), float(l_2d), float(l_dep), float(total), n_foreground)
