"""Linearly-increasing depth discretization and ordinal depth decoding.

Bin ``l`` covers ``[b_l, b_{l+1})`` with ``b_l = d_min + delta * l * (l + 1) / 2``,
so its width is ``delta * (l + 1)``. The ordinal head scores every bin with a
pair of logits; channel 0 is the probability that the depth lies beyond the
bin, channel 1 the complement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .errors import BoundsError, ConfigurationError, DepthRangeError, ShapeError

ACTIVATION_THRESHOLD = 0.5


@dataclass(frozen=True)
class LidBinning:
    d_min: float = 1.0
    d_max: float = 60.0
    K: int = 80
    delta: float = field(init=False)

    def __post_init__(self) -> None:
        if not (self.d_max > self.d_min >= 0):
            raise ConfigurationError(f"need d_max > d_min >= 0, got [{self.d_min}, {self.d_max}]")
        if int(self.K) != self.K or self.K < 1:
            raise ConfigurationError(f"bin count K must be a positive integer, got {self.K}")
        object.__setattr__(self, "K", int(self.K))
        object.__setattr__(self, "delta", 2.0 * (self.d_max - self.d_min) / (self.K * (self.K + 1)))

    def boundary(self, l):
        """Lower edge of bin ``l`` (``l = K`` gives the far edge of the last bin)."""
        l = np.asarray(l, dtype=np.float64)
        return self.d_min + self.delta * l * (l + 1) / 2.0

    def boundaries(self) -> NDArray[np.float64]:
        return self.boundary(np.arange(self.K + 1))


def bin_width(binning: LidBinning) -> float:
    return binning.delta


def _bin_index_array(depth: NDArray[np.float64], binning: LidBinning) -> NDArray[np.int64]:
    d = np.asarray(depth, dtype=np.float64)
    ratio = np.maximum(8.0 * (d - binning.d_min) / binning.delta, 0.0)
    l = np.floor(-0.5 + 0.5 * np.sqrt(1.0 + ratio)).astype(np.int64)
    l = np.clip(l, 0, binning.K - 1)
    # The closed form can land one bin off next to an edge because of rounding;
    # settle against the explicit boundaries so floor semantics are exact.
    l = np.where((l > 0) & (d < binning.boundary(l)), l - 1, l)
    l = np.where((l < binning.K - 1) & (d >= binning.boundary(l + 1)), l + 1, l)
    return l


def bin_index(depth, binning: LidBinning):
    """Bin containing ``depth``; exact edges belong to the upper bin, ``d_max`` to bin K-1.

    Accepts a scalar (returns ``int``) or an array (returns an int64 array).
    """
    d = np.asarray(depth, dtype=np.float64)
    if np.any(~np.isfinite(d)) or np.any(d < binning.d_min) or np.any(d > binning.d_max):
        raise DepthRangeError(f"depth outside [{binning.d_min}, {binning.d_max}]")
    out = _bin_index_array(d, binning)
    return int(out) if out.ndim == 0 else out


def clamped_bin_index(depth, binning: LidBinning):
    """Like :func:`bin_index` but clamps out-of-range depths; also returns how many were clamped."""
    d = np.asarray(depth, dtype=np.float64)
    n_clamped = int(np.count_nonzero((d < binning.d_min) | (d > binning.d_max)))
    out = _bin_index_array(np.clip(d, binning.d_min, binning.d_max), binning)
    return (int(out) if out.ndim == 0 else out), n_clamped


def bin_median(l, binning: LidBinning):
    """Midpoint of bin ``l``: ``d_min + delta * (l + 1)**2 / 2``."""
    arr = np.asarray(l)
    if np.any(arr < 0) or np.any(arr >= binning.K):
        raise BoundsError(f"bin index outside [0, {binning.K - 1}]")
    mid = binning.d_min + binning.delta * (arr.astype(np.float64) + 1.0) ** 2 / 2.0
    return float(mid) if mid.ndim == 0 else mid


def _check_pair_axis(values: NDArray) -> None:
    if values.ndim < 2 or values.shape[-1] != 2:
        raise ShapeError(f"ordinal tensors need a trailing (K, 2) layout, got shape {values.shape}")


def ordinal_softmax(logits: NDArray) -> NDArray[np.float64]:
    """Two-way softmax over the last axis of an (..., K, 2) logit tensor."""
    y = np.asarray(logits, dtype=np.float64)
    _check_pair_axis(y)
    if not np.all(np.isfinite(y)):
        raise ShapeError("ordinal logits must be finite")
    # Two-class softmax == logistic of the logit gap; this form never overflows.
    gap = y[..., 0] - y[..., 1]
    p0 = np.empty_like(gap)
    pos = gap >= 0
    e = np.exp(-np.abs(gap))
    p0[pos] = 1.0 / (1.0 + e[pos])
    p0[~pos] = e[~pos] / (1.0 + e[~pos])
    p1 = np.where(pos, e / (1.0 + e), 1.0 / (1.0 + e))
    return np.stack([p0, p1], axis=-1)


def decode_depth(probs: NDArray, binning: LidBinning) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
    """Count activated bins per pixel and read off the bin median.

    Returns ``(d_c, depth)`` with the leading (pixel) shape of ``probs``.
    """
    p = np.asarray(probs, dtype=np.float64)
    _check_pair_axis(p)
    if p.shape[-2] != binning.K:
        raise ShapeError(f"probabilities carry {p.shape[-2]} bins, binning has {binning.K}")
    d_c = np.count_nonzero(p[..., 0] > ACTIVATION_THRESHOLD, axis=-1)
    d_c = np.minimum(d_c, binning.K - 1).astype(np.int64)
    return d_c, bin_median(d_c, binning) if d_c.ndim else bin_median(int(d_c), binning)


@dataclass(frozen=True)
class DepthDistribution:
    """Per-pixel distribution over bins plus a mask of pixels that fell back to uniform."""

    values: NDArray[np.float64]
    degenerate: NDArray[np.bool_]

    @property
    def n_degenerate(self) -> int:
        return int(np.count_nonzero(self.degenerate))


def signed_depth_differences(probs: NDArray) -> NDArray[np.float64]:
    """Literal ``P^l_0 - P^{l-1}_0`` with ``P^{-1}_0 := 1``; for auditing only.

    For a survival-shaped ``P_0`` these are non-positive; :func:`depth_distribution`
    uses their negation.
    """
    p = np.asarray(probs, dtype=np.float64)
    _check_pair_axis(p)
    p0 = p[..., 0]
    prev = np.concatenate([np.ones_like(p0[..., :1]), p0[..., :-1]], axis=-1)
    return p0 - prev


def depth_distribution(probs: NDArray) -> DepthDistribution:
    """Bin probabilities from ordinal survival probabilities.

    Mass in bin ``l`` is ``P^{l-1}_0 - P^l_0`` (``P^{-1}_0 := 1``); negative
    entries from non-monotone inputs are clamped to zero and each pixel is
    renormalized. Pixels with no mass left become uniform and are flagged.
    """
    raw = np.maximum(-signed_depth_differences(probs), 0.0)
    total = raw.sum(axis=-1, keepdims=True)
    degenerate = total[..., 0] <= 0.0
    K = raw.shape[-1]
    safe = np.where(total > 0.0, total, 1.0)
    values = np.where(total > 0.0, raw / safe, 1.0 / K)
    return DepthDistribution(values=values, degenerate=degenerate)


def ordinal_logits_for_targets(
    targets: NDArray[np.int64], K: int, p_hit: float = 0.9, valid: NDArray[np.bool_] | None = None
) -> NDArray[np.float64]:
    """Logits whose correct ordinal bits get probability ``p_hit``.

    Bins below the target are "beyond" (channel 0), the rest are not.
    Pixels outside ``valid`` get all-zero logits (probability 0.5 everywhere).
    """
    if not 0.5 < p_hit < 1.0:
        raise ConfigurationError(f"p_hit must lie in (0.5, 1), got {p_hit}")
    t = np.asarray(targets, dtype=np.int64)
    k = np.arange(K)
    beyond = k < t[..., None]
    hi, lo = math.log(p_hit), math.log(1.0 - p_hit)
    logits = np.empty(t.shape + (K, 2))
    logits[..., 0] = np.where(beyond, hi, lo)
    logits[..., 1] = np.where(beyond, lo, hi)
    if valid is not None:
        logits[~np.asarray(valid, dtype=bool)] = 0.0
    return logits
