"""Deformable-attention fusion of voxel and depth features into the BEV map.

Locations are continuous array indices: for a map stored as ``[i0, i1, c]``
the location ``(a, b)`` with integer coordinates sits exactly on entry
``[a, b]``. BEV maps are indexed ``[ix, iy]``; image-plane depth features are
indexed ``[v, u]`` so camera projections are sampled at ``(v, u)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .camera import CameraRig, project_many
from .errors import ConfigurationError, ShapeError
from .pseudo3d import VoxelGridSpec
from .voxelnet import BevFeatureMap

# --- bilinear sampling ----------------------------------------------------


def _corners(shape: tuple[int, int], locs: NDArray[np.float64]):
    """Corner indices, weights and in-bounds flags for bilinear interpolation.

    Returns ``(i, j, w, ok)`` each with shape ``locs.shape[:-1] + (4,)``;
    corner order is (0,0), (1,0), (0,1), (1,1).
    """
    a, b = locs[..., 0], locs[..., 1]
    a0, b0 = np.floor(a), np.floor(b)
    fa, fb = a - a0, b - b0
    a0 = a0.astype(np.int64)
    b0 = b0.astype(np.int64)
    i = np.stack([a0, a0 + 1, a0, a0 + 1], axis=-1)
    j = np.stack([b0, b0, b0 + 1, b0 + 1], axis=-1)
    w = np.stack([(1 - fa) * (1 - fb), fa * (1 - fb), (1 - fa) * fb, fa * fb], axis=-1)
    ok = (i >= 0) & (i < shape[0]) & (j >= 0) & (j < shape[1])
    return i, j, w, ok, fa, fb


def _gather(values: NDArray, i, j, ok) -> NDArray:
    vals = values[np.where(ok, i, 0), np.where(ok, j, 0)]
    return np.where(ok[..., None], vals, 0.0)


def bilinear_sample_many(values: NDArray, locs: NDArray) -> NDArray[np.float64]:
    """Sample an (A, B, C) map at (..., 2) locations; out-of-map neighbors are zero."""
    values = np.asarray(values, dtype=np.float64)
    locs = np.asarray(locs, dtype=np.float64)
    i, j, w, ok, _, _ = _corners(values.shape[:2], locs)
    corners = _gather(values, i, j, ok)
    return np.einsum("...k,...kc->...c", w, corners)


def bilinear_sample(value_map, location) -> NDArray[np.float64]:
    values = value_map.features if isinstance(value_map, BevFeatureMap) else value_map
    return bilinear_sample_many(values, np.asarray(location, dtype=np.float64))


def _bilinear_with_grad(values: NDArray, locs: NDArray):
    """Samples, their derivative w.r.t. each location coordinate, and the scatter plan."""
    i, j, w, ok, fa, fb = _corners(values.shape[:2], locs)
    c = _gather(values, i, j, ok)  # (..., 4, C)
    out = np.einsum("...k,...kc->...c", w, c)
    c00, c10, c01, c11 = c[..., 0, :], c[..., 1, :], c[..., 2, :], c[..., 3, :]
    d_a = (1 - fb)[..., None] * (c10 - c00) + fb[..., None] * (c11 - c01)
    d_b = (1 - fa)[..., None] * (c01 - c00) + fa[..., None] * (c11 - c10)
    return out, np.stack([d_a, d_b], axis=-2), (i, j, w, ok)


# --- dense maps -----------------------------------------------------------


@dataclass(frozen=True)
class LinearMap:
    """``x @ weight + bias`` on the last axis."""

    weight: NDArray[np.float64]
    bias: NDArray[np.float64]

    def __post_init__(self) -> None:
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 2 or b.shape != (w.shape[1],):
            raise ShapeError(f"linear map weight {w.shape} and bias {b.shape} disagree")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    def __call__(self, x: NDArray) -> NDArray[np.float64]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"input width {x.shape[-1]} != map input width {self.weight.shape[0]}")
        return x @ self.weight + self.bias

    @classmethod
    def random(cls, c_in: int, c_out: int, rng: np.random.Generator, gain: float = 1.0) -> "LinearMap":
        return cls(rng.normal(0.0, gain / math.sqrt(c_in), size=(c_in, c_out)), np.zeros(c_out))

    @classmethod
    def zeros(cls, c_in: int, c_out: int) -> "LinearMap":
        return cls(np.zeros((c_in, c_out)), np.zeros(c_out))


# --- deformable attention -------------------------------------------------

PARAM_NAMES = ("q_w", "q_b", "off_w", "off_b", "att_w", "att_b", "val_w", "val_b", "out_w", "out_b")


@dataclass(frozen=True)
class DeformableAttnParams:
    """Multi-head deformable attention with ``heads`` heads of ``points`` samples each.

    Query, value and output projections are C x C; the offset projection
    emits ``heads * points * 2`` offsets (in the value map's index units) and
    the weight projection ``heads * points`` logits. Channel ``c`` belongs to
    head ``c // (C / heads)``.
    """

    q_w: NDArray[np.float64]
    q_b: NDArray[np.float64]
    off_w: NDArray[np.float64]
    off_b: NDArray[np.float64]
    att_w: NDArray[np.float64]
    att_b: NDArray[np.float64]
    val_w: NDArray[np.float64]
    val_b: NDArray[np.float64]
    out_w: NDArray[np.float64]
    out_b: NDArray[np.float64]
    heads: int = 2
    points: int = 4

    def __post_init__(self) -> None:
        for name in PARAM_NAMES:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ConfigurationError(f"non-finite attention parameter {name}")
            object.__setattr__(self, name, arr)
        C = self.channels
        HP = self.heads * self.points
        expected = {
            "q_w": (C, C), "q_b": (C,),
            "off_w": (C, 2 * HP), "off_b": (2 * HP,),
            "att_w": (C, HP), "att_b": (HP,),
            "val_w": (C, C), "val_b": (C,),
            "out_w": (C, C), "out_b": (C,),
        }
        for name, shp in expected.items():
            if getattr(self, name).shape != shp:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shp}")
        if C % self.heads:
            raise ConfigurationError(f"channel width {C} is not divisible by {self.heads} heads")

    @property
    def channels(self) -> int:
        return self.q_w.shape[0]

    def arrays(self) -> dict[str, NDArray[np.float64]]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def with_arrays(self, **arrays) -> "DeformableAttnParams":
        return replace(self, **arrays)

    @classmethod
    def uniform(cls, channels: int, heads: int = 2, points: int = 4) -> "DeformableAttnParams":
        """Zero offsets, equal weights, identity projections."""
        HP = heads * points
        eye = np.eye(channels)
        zc = np.zeros(channels)
        return cls(eye, zc, np.zeros((channels, 2 * HP)), np.zeros(2 * HP), np.zeros((channels, HP)),
                   np.zeros(HP), eye.copy(), zc.copy(), eye.copy(), zc.copy(), heads, points)

    @classmethod
    def zeros(cls, channels: int, heads: int = 2, points: int = 4) -> "DeformableAttnParams":
        u = cls.uniform(channels, heads, points)
        return replace(u, q_w=np.zeros_like(u.q_w), val_w=np.zeros_like(u.val_w), out_w=np.zeros_like(u.out_w))

    @classmethod
    def random(
        cls,
        channels: int,
        rng: np.random.Generator,
        heads: int = 2,
        points: int = 4,
        offset_scale: float = 1.0,
        identity_mix: float = 0.0,
        noise: float = 1.0,
    ) -> "DeformableAttnParams":
        """Random parameters.

        ``identity_mix`` blends the value and output projections toward the
        identity (1.0 gives ``I + noise * N / sqrt(C)``); ``offset_scale`` sets
        the typical offset magnitude in index units.
        """
        C, HP = channels, heads * points
        s = 1.0 / math.sqrt(C)

        def proj() -> NDArray:
            return identity_mix * np.eye(C) + noise * rng.normal(0.0, s, size=(C, C))

        return cls(
            q_w=rng.normal(0.0, s, size=(C, C)),
            q_b=rng.normal(0.0, 0.1, size=C),
            off_w=rng.normal(0.0, offset_scale * s, size=(C, 2 * HP)),
            off_b=rng.normal(0.0, offset_scale, size=2 * HP),
            att_w=rng.normal(0.0, s, size=(C, HP)),
            att_b=np.zeros(HP),
            val_w=proj(),
            val_b=rng.normal(0.0, 0.1, size=C) * noise,
            out_w=proj(),
            out_b=rng.normal(0.0, 0.1, size=C) * noise,
            heads=heads,
            points=points,
        )


@dataclass
class _AttnCache:
    q: NDArray
    q1: NDArray
    attn: NDArray
    samples: NDArray
    dsamples: NDArray
    scatter: tuple
    projected: NDArray
    concat: NDArray


def _softmax(x: NDArray, axis: int = -1) -> NDArray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _forward(queries: NDArray, refs: NDArray, values: NDArray, p: DeformableAttnParams, keep: bool):
    q = np.asarray(queries, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    C = p.channels
    if q.ndim != 2 or q.shape[1] != C:
        raise ShapeError(f"queries must be (Q, {C}), got {q.shape}")
    if refs.shape != (len(q), 2):
        raise ShapeError(f"reference locations must be (Q, 2), got {refs.shape}")
    if values.ndim != 3 or values.shape[2] != C:
        raise ShapeError(f"value map must be (A, B, {C}), got {values.shape}")
    Q, H, P = len(q), p.heads, p.points
    D = C // H
    q1 = q @ p.q_w + p.q_b
    offsets = (q1 @ p.off_w + p.off_b).reshape(Q, H, P, 2)
    attn = _softmax((q1 @ p.att_w + p.att_b).reshape(Q, H, P))
    locs = refs[:, None, None, :] + offsets
    if keep:
        samples, dsamples, scatter = _bilinear_with_grad(values, locs)
    else:
        samples = bilinear_sample_many(values, locs)
        dsamples = scatter = None
    projected = samples @ p.val_w + p.val_b  # (Q, H, P, C)
    per_head = projected.reshape(Q, H, P, H, D)[:, np.arange(H), :, np.arange(H), :]  # (H, Q, P, D)
    heads_out = np.einsum("qhp,hqpd->qhd", attn, per_head)
    concat = heads_out.reshape(Q, C)
    out = concat @ p.out_w + p.out_b
    cache = _AttnCache(q, q1, attn, samples, dsamples, scatter, projected, concat) if keep else None
    return out, cache


def deformable_attention_many(queries: NDArray, refs: NDArray, value_map, params: DeformableAttnParams) -> NDArray:
    """Batched deformable attention: one output row per (query, reference) row."""
    values = value_map.features if isinstance(value_map, BevFeatureMap) else value_map
    out, _ = _forward(queries, refs, values, params, keep=False)
    return out


def deformable_attention(query: NDArray, ref, value_map, params: DeformableAttnParams) -> NDArray[np.float64]:
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (params.channels,):
        raise ShapeError(f"query must have length {params.channels}, got {q.shape}")
    return deformable_attention_many(q[None], np.asarray(ref, dtype=np.float64)[None], value_map, params)[0]


def deformable_attention_grad(
    queries: NDArray, refs: NDArray, values: NDArray, params: DeformableAttnParams, grad_out: NDArray
) -> tuple[NDArray, dict[str, NDArray]]:
    """Forward output and gradients of ``sum(grad_out * output)``.

    The gradient dict has one entry per projection array plus ``"query"``
    (Q, C) and ``"values"`` (same shape as the value map).
    """
    p = params
    values = np.asarray(values, dtype=np.float64)
    out, c = _forward(queries, refs, values, p, keep=True)
    g = np.asarray(grad_out, dtype=np.float64).reshape(out.shape)
    Q, H, P, C = len(c.q), p.heads, p.points, p.channels
    D = C // H
    grads: dict[str, NDArray] = {}
    grads["out_w"] = c.concat.T @ g
    grads["out_b"] = g.sum(axis=0)
    g_heads = (g @ p.out_w.T).reshape(Q, H, D)
    proj_h = c.projected.reshape(Q, H, P, H, D)[:, np.arange(H), :, np.arange(H), :]  # (H, Q, P, D)
    g_attn = np.einsum("qhd,hqpd->qhp", g_heads, proj_h)
    g_proj = np.zeros((Q, H, P, H, D))
    g_proj[:, np.arange(H), :, np.arange(H), :] = np.einsum("qhp,qhd->hqpd", c.attn, g_heads)
    g_proj = g_proj.reshape(Q, H, P, C)
    grads["val_w"] = np.einsum("qhpc,qhpd->cd", c.samples, g_proj)
    grads["val_b"] = g_proj.sum(axis=(0, 1, 2))
    g_samples = g_proj @ p.val_w.T  # (Q, H, P, C)
    i, j, w, ok = c.scatter
    g_values = np.zeros_like(values)
    contrib = w[..., :, None] * g_samples[..., None, :]  # (Q, H, P, 4, C)
    np.add.at(g_values, (i[ok], j[ok]), contrib[ok])
    grads["values"] = g_values
    g_offsets = np.einsum("qhpkc,qhpc->qhpk", c.dsamples, g_samples).reshape(Q, 2 * H * P)
    g_logits = (c.attn * (g_attn - (c.attn * g_attn).sum(axis=-1, keepdims=True))).reshape(Q, H * P)
    grads["off_w"] = c.q1.T @ g_offsets
    grads["off_b"] = g_offsets.sum(axis=0)
    grads["att_w"] = c.q1.T @ g_logits
    grads["att_b"] = g_logits.sum(axis=0)
    g_q1 = g_offsets @ p.off_w.T + g_logits @ p.att_w.T
    grads["q_w"] = c.q.T @ g_q1
    grads["q_b"] = g_q1.sum(axis=0)
    grads["query"] = g_q1 @ p.q_w.T
    return out, grads


def attention_weights(query: NDArray, params: DeformableAttnParams) -> NDArray[np.float64]:
    """Per-head normalized attention weights, shape (heads, points)."""
    q1 = np.asarray(query, dtype=np.float64) @ params.q_w + params.q_b
    return _softmax((q1 @ params.att_w + params.att_b).reshape(params.heads, params.points))


# --- VSA / DCA ------------------------------------------------------------


def vsa_fuse(
    f_v: BevFeatureMap,
    f_b: BevFeatureMap,
    params: DeformableAttnParams,
    adapter: LinearMap | None = None,
    residual: bool = False,
) -> BevFeatureMap:
    """Voxel self-attention: valid voxel cells query the BEV map at their own location.

    Cells where ``f_v`` is invalid are copied from ``f_b`` untouched. With
    ``residual`` the attention output is added to ``f_b`` instead of
    replacing it.
    """
    if f_v.shape != f_b.shape:
        raise ShapeError(f"voxel grid {f_v.shape} does not match BEV grid {f_b.shape}")
    out = f_b.features.copy()
    cells = np.argwhere(f_v.valid)
    if len(cells):
        q = f_v.features[cells[:, 0], cells[:, 1]]
        if adapter is not None:
            q = adapter(q)
        upd = deformable_attention_many(q, cells.astype(np.float64), f_b.features, params)
        if residual:
            upd = upd + f_b.features[cells[:, 0], cells[:, 1]]
        out[cells[:, 0], cells[:, 1]] = upd
    return BevFeatureMap(out, f_b.valid.copy())


@dataclass(frozen=True)
class PillarReferencePoints:
    """(nx, ny, n_ref, 3) ego-frame points at each cell's center, evenly spaced in z."""

    points: NDArray[np.float64]

    @property
    def n_ref(self) -> int:
        return self.points.shape[2]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.points.shape[:2]


def pillar_reference_points(spec: VoxelGridSpec, n_ref: int = 4) -> PillarReferencePoints:
    if n_ref < 1:
        raise ConfigurationError("need at least one reference point per pillar")
    centers = spec.cell_centers_xy()
    z0, z1 = spec.z_range
    zs = z0 + (np.arange(n_ref) + 0.5) * (z1 - z0) / n_ref
    nx, ny, _ = centers.shape
    pts = np.empty((nx, ny, n_ref, 3))
    pts[..., :2] = centers[:, :, None, :]
    pts[..., 2] = zs
    return PillarReferencePoints(pts)


def pool_depth_features(f_d: NDArray, stride: int) -> NDArray[np.float64]:
    """Average-pool an (H, W, ...) feature map by ``stride``; partial edge windows average what they cover."""
    f = np.asarray(f_d, dtype=np.float64)
    if stride == 1:
        return f
    H, W = f.shape[:2]
    Hp, Wp = -(-H // stride), -(-W // stride)
    pad = [(0, Hp * stride - H), (0, Wp * stride - W)] + [(0, 0)] * (f.ndim - 2)
    summed = np.pad(f, pad).reshape(Hp, stride, Wp, stride, *f.shape[2:]).sum(axis=(1, 3))
    ones = np.pad(np.ones((H, W)), pad[:2]).reshape(Hp, stride, Wp, stride).sum(axis=(1, 3))
    return summed / ones.reshape(Hp, Wp, *([1] * (f.ndim - 2)))


def _depth_value_map(f_d: NDArray) -> NDArray[np.float64]:
    """Pre-softmax depth features (H, W, K, 2) or (H, W, 2K) as an (H, W, 2K) map."""
    f = np.asarray(f_d, dtype=np.float64)
    if f.ndim == 4:
        f = f.reshape(f.shape[0], f.shape[1], -1)
    if f.ndim != 3:
        raise ShapeError(f"depth features must be (H, W, K, 2) or (H, W, C), got {f.shape}")
    return f


def dca_fuse(
    queries: BevFeatureMap,
    f_d: Sequence[NDArray],
    rig: CameraRig,
    refs: PillarReferencePoints,
    params: DeformableAttnParams,
    adapter: LinearMap | None = None,
    residual: bool = False,
    feature_stride: int = 1,
) -> BevFeatureMap:
    """Depth cross-attention: each pillar samples the depth features of every camera it projects into.

    The per-query result is the sum over hit cameras and hit reference points
    of deformable attention, divided by the number of hit cameras. Missed
    reference points contribute nothing; queries with no hit pass through.
    ``feature_stride`` is the image-pixel size of one depth-feature cell.
    """
    if rig is None or len(rig) == 0:
        raise ConfigurationError("depth cross-attention needs a non-empty camera rig")
    if len(f_d) != len(rig):
        raise ShapeError(f"{len(f_d)} depth feature maps for {len(rig)} cameras")
    if refs.grid_shape != queries.shape:
        raise ShapeError(f"reference grid {refs.grid_shape} does not match query grid {queries.shape}")
    nx, ny = queries.shape
    Q = nx * ny
    q_flat = queries.features.reshape(Q, -1)
    ref_pts = refs.points.reshape(Q * refs.n_ref, 3)
    query_of = np.repeat(np.arange(Q), refs.n_ref)
    total = np.zeros((Q, params.channels))
    n_cams = np.zeros(Q, dtype=np.int64)
    for cam, fmap in zip(rig, f_d):
        values = _depth_value_map(fmap)
        expected = (-(-cam.intrinsics.height // feature_stride), -(-cam.intrinsics.width // feature_stride))
        if values.shape[:2] != expected:
            raise ShapeError(f"depth feature map {values.shape[:2]} does not match expected {expected}")
        if adapter is not None:
            values = adapter(values)
        u, v, _, hit = project_many(ref_pts, cam)
        if not np.any(hit):
            continue
        qi = query_of[hit]
        locs = (np.stack([v[hit], u[hit]], axis=1) + 0.5) / feature_stride - 0.5
        out = deformable_attention_many(q_flat[qi], locs, values, params)
        np.add.at(total, qi, out)
        n_cams[np.unique(qi)] += 1
    result = q_flat.copy()
    seen = n_cams > 0
    upd = total[seen] / n_cams[seen, None]
    result[seen] = result[seen] + upd if residual else upd
    return BevFeatureMap(result.reshape(queries.features.shape), queries.valid.copy())


# --- stack ----------------------------------------------------------------


@dataclass(frozen=True)
class FeedForward:
    """Per-cell ``x + relu(x @ w1 + b1) @ w2 + b2`` with hidden width 2C."""

    w1: NDArray[np.float64]
    b1: NDArray[np.float64]
    w2: NDArray[np.float64]
    b2: NDArray[np.float64]

    def __call__(self, bev: BevFeatureMap) -> BevFeatureMap:
        x = bev.features
        h = np.maximum(x @ self.w1 + self.b1, 0.0)
        return BevFeatureMap(x + h @ self.w2 + self.b2, bev.valid.copy())

    @classmethod
    def zeros(cls, channels: int) -> "FeedForward":
        return cls(np.zeros((channels, 2 * channels)), np.zeros(2 * channels),
                   np.zeros((2 * channels, channels)), np.zeros(channels))

    @classmethod
    def random(cls, channels: int, rng: np.random.Generator, gain: float = 0.1) -> "FeedForward":
        C = channels
        return cls(rng.normal(0.0, 1.0 / math.sqrt(C), size=(C, 2 * C)), np.zeros(2 * C),
                   rng.normal(0.0, gain / math.sqrt(2 * C), size=(2 * C, C)), np.zeros(C))

    def arrays(self) -> dict[str, NDArray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class FusionLayer:
    vsa: DeformableAttnParams
    dca: DeformableAttnParams
    ffn: FeedForward


@dataclass(frozen=True)
class FusionStack:
    """Encoder layers of (voxel self-attention, depth cross-attention, feed-forward).

    Both attention sub-layers are residual inside the stack. ``voxel_adapter``
    maps flattened voxel features to the BEV width and ``depth_adapter`` maps
    the 2K pre-softmax depth channels to it.
    """

    layers: tuple[FusionLayer, ...]
    voxel_adapter: LinearMap
    depth_adapter: LinearMap
    n_ref: int = 4
    seed: int | None = None

    @property
    def channels(self) -> int:
        return self.voxel_adapter.weight.shape[1]

    @classmethod
    def default(
        cls,
        voxel_channels: int,
        depth_channels: int,
        channels: int = 16,
        n_layers: int = 3,
        heads: int = 2,
        points: int = 4,
        n_ref: int = 4,
        seed: int = 0,
        bev_offset_scale: float = 0.5,
        image_offset_scale: float = 2.0,
    ) -> "FusionStack":
        """Untrained stack with near-identity value/output projections."""
        rng = np.random.default_rng(seed)
        layers = []
        for _ in range(n_layers):
            vsa = DeformableAttnParams.random(channels, rng, heads, points, bev_offset_scale, 1.0, 0.1)
            dca = DeformableAttnParams.random(channels, rng, heads, points, image_offset_scale, 1.0, 0.1)
            layers.append(FusionLayer(vsa, dca, FeedForward.random(channels, rng)))
        return cls(
            tuple(layers),
            LinearMap.random(voxel_channels, channels, rng),
            LinearMap.random(depth_channels, channels, rng),
            n_ref,
            seed,
        )

    def to_tensors(self) -> dict[str, NDArray]:
        out = {
            "fusion.adapter.voxel.weight": self.voxel_adapter.weight,
            "fusion.adapter.voxel.bias": self.voxel_adapter.bias,
            "fusion.adapter.depth.weight": self.depth_adapter.weight,
            "fusion.adapter.depth.bias": self.depth_adapter.bias,
        }
        for li, layer in enumerate(self.layers):
            for op in ("vsa", "dca"):
                for role, arr in getattr(layer, op).arrays().items():
                    out[f"fusion.{li}.{op}.{role}"] = arr
            for role, arr in layer.ffn.arrays().items():
                out[f"fusion.{li}.ffn.{role}"] = arr
        return out

    @classmethod
    def from_tensors(
        cls, tensors: dict[str, NDArray], n_layers: int = 3, heads: int = 2, points: int = 4, n_ref: int = 4
    ) -> "FusionStack":
        def get(name: str) -> NDArray:
            try:
                return np.asarray(tensors[name], dtype=np.float64)
            except KeyError as exc:
                raise ConfigurationError(f"fusion parameters missing {name}") from exc

        layers = []
        for li in range(n_layers):
            attn = {
                op: DeformableAttnParams(**{r: get(f"fusion.{li}.{op}.{r}") for r in PARAM_NAMES}, heads=heads, points=points)
                for op in ("vsa", "dca")
            }
            ffn = FeedForward(*(get(f"fusion.{li}.ffn.{r}") for r in ("w1", "b1", "w2", "b2")))
            layers.append(FusionLayer(attn["vsa"], attn["dca"], ffn))
        return cls(
            tuple(layers),
            LinearMap(get("fusion.adapter.voxel.weight"), get("fusion.adapter.voxel.bias")),
            LinearMap(get("fusion.adapter.depth.weight"), get("fusion.adapter.depth.bias")),
            n_ref,
        )


def fuse(
    f_b: BevFeatureMap,
    f_v: BevFeatureMap,
    f_d: Sequence[NDArray],
    rig: CameraRig,
    stack: FusionStack,
    refs: PillarReferencePoints,
    feature_stride: int = 1,
) -> BevFeatureMap:
    """Run the fusion stack and return the updated BEV map."""
    if f_b.channels != stack.channels:
        raise ShapeError(f"BEV width {f_b.channels} != fusion width {stack.channels}")
    depth_maps = [stack.depth_adapter(_depth_value_map(f)) for f in f_d]
    x = f_b
    for layer in stack.layers:
        x = vsa_fuse(f_v, x, layer.vsa, stack.voxel_adapter, residual=True)
        x = dca_fuse(x, depth_maps, rig, refs, layer.dca, residual=True, feature_stride=feature_stride)
        x = layer.ffn(x)
    return x
