"""Invariant suite behind the ``verify`` verb.

Each check reports the measured worst-case deviation next to its tolerance.
Checks are sized to finish in a few seconds; the test suite runs the
heavier sweeps.
"""

from __future__ import annotations

import math
import traceback
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import oracles
from .camera import CameraRig, format_rig, parse_rig, project_many, to_ego, unproject_many
from .config import PipelineConfig, format_config, parse_config
from .depth_bins import bin_index, decode_depth, depth_distribution, ordinal_logits_for_targets, ordinal_softmax
from .errors import OABevError
from .foreground import DepthTargets, ForegroundMask
from .fusion import (
    DeformableAttnParams,
    bilinear_sample_many,
    dca_fuse,
    deformable_attention_grad,
    deformable_attention_many,
    pillar_reference_points,
    vsa_fuse,
)
from .io import decode_tensors, encode_tensors
from .losses import ordinal_depth_loss
from .pseudo3d import SparseVoxelGrid, VoxelGridSpec
from .voxelnet import BevFeatureMap, SparseConvLayer, sparse_conv_forward


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = f"{status} {self.name} measured={self.measured:.3e} tol={self.tolerance:.1e}"
        return f"{text} ({self.detail})" if self.detail else text


def _check(name: str, measured: float, tol: float, detail: str = "", strict: bool = False) -> CheckResult:
    ok = measured < tol if strict else measured <= tol
    return CheckResult(name, bool(ok and math.isfinite(measured)), float(measured), tol, detail)


def check_rig_round_trip(rig: CameraRig, rng: np.random.Generator, n: int = 2000) -> CheckResult:
    worst = 0.0
    for cam in rig:
        intr, pose = cam
        u = rng.uniform(0, intr.width, n)
        v = rng.uniform(0, intr.height, n)
        d = rng.uniform(0.5, 80.0, n)
        ego = to_ego(unproject_many(u, v, d, intr), pose)
        pu, pv, pz, hit = project_many(ego, cam)
        back = to_ego(unproject_many(pu, pv, pz, intr), pose)
        worst = max(worst, float(np.abs(back - ego).max()), float((~hit).sum()))
    return _check("geometry round trip", worst, 1e-9, f"{len(rig)} cameras")


def check_rig_file(rig: CameraRig) -> CheckResult:
    again = parse_rig(format_rig(rig))
    err = max(
        float(np.abs(a.pose.rotation - b.pose.rotation).max()) + float(np.abs(a.pose.translation - b.pose.translation).max())
        for a, b in zip(rig, again)
    )
    return _check("rig file round trip", err + abs(len(rig) - len(again)), 0.0)


def check_lid(cfg: PipelineConfig, rng: np.random.Generator, n: int = 2000) -> list[CheckResult]:
    b = cfg.binning
    d = np.concatenate([rng.uniform(b.d_min, b.d_max, n), b.boundaries()])
    got = bin_index(d, b)
    want = np.array([oracles.boundary_scan_bin(x, b) for x in d])
    mism = int(np.count_nonzero(got != want))
    edges = b.boundaries()
    tile = max(abs(edges[0] - b.d_min), abs(edges[-1] - b.d_max), float(np.abs(np.diff(edges) - b.delta * np.arange(1, b.K + 1)).max()))
    return [
        _check("LID bin index vs boundary scan", mism, 0, f"K={b.K}"),
        _check("LID boundaries tile range", tile, 1e-9, f"K={b.K}"),
    ]


def check_decode(cfg: PipelineConfig, rng: np.random.Generator, n: int = 300) -> CheckResult:
    K = cfg.binning.K
    p0 = rng.uniform(0, 1, (n, K))
    p0[rng.uniform(size=(n, K)) < 0.1] = 0.5
    probs = np.stack([p0, 1 - p0], axis=-1)
    got, _ = decode_depth(probs, cfg.binning)
    want = np.array([oracles.enumerate_decode(probs[i], K) for i in range(n)])
    return _check("ordinal decode vs enumeration", int(np.count_nonzero(got != want)), 0, f"K={K}")


def check_distribution(cfg: PipelineConfig, rng: np.random.Generator, n: int = 500) -> CheckResult:
    K = cfg.binning.K
    p0 = rng.uniform(0, 1, (n, K))
    dist = depth_distribution(np.stack([p0, 1 - p0], axis=-1)).values
    err = max(float(np.abs(dist.sum(axis=-1) - 1).max()), float(-min(dist.min(), 0.0)))
    return _check("depth distribution normalized", err, 1e-6, f"K={K}")


def check_loss(cfg: PipelineConfig, rng: np.random.Generator, cases: int = 6) -> list[CheckResult]:
    K = cfg.binning.K
    k = min(K, 6)
    worst = 0.0
    for _ in range(cases):
        H, W = 2, 3
        flags = rng.uniform(size=(H, W)) < 0.7
        flags[0, 0] = True
        bins = np.where(flags, rng.integers(0, k, (H, W)), -1)
        mask = ForegroundMask(flags, np.where(flags, 0, -1))
        targets = DepthTargets(bins)
        logits = rng.normal(size=(H, W, k, 2))
        _, g = ordinal_depth_loss(ordinal_softmax(logits), targets, mask)
        fd = oracles.central_difference(lambda y: ordinal_depth_loss(ordinal_softmax(y), targets, mask)[0], logits)
        worst = max(worst, oracles.relative_error(g, fd))
    flags = np.ones((2, 2), dtype=bool)
    bins = rng.integers(0, K, (2, 2))
    perfect = np.stack([(np.arange(K) < bins[..., None]), (np.arange(K) >= bins[..., None])], axis=-1).astype(float)
    l0, _ = ordinal_depth_loss(perfect, DepthTargets(bins), ForegroundMask(flags, np.zeros((2, 2), dtype=np.int64)))
    return [
        _check("ordinal loss gradient", worst, 1e-4, f"{cases} cases, K={k}"),
        _check("ordinal loss perfect prediction", abs(l0), 1e-9, f"K={K}"),
    ]


def _random_grid(rng: np.random.Generator, shape, c: int, density: float) -> SparseVoxelGrid:
    active = rng.uniform(size=shape) < density
    dense = rng.normal(size=tuple(shape) + (c,))
    return SparseVoxelGrid.from_dense(dense, active)


def check_sparse_conv(rng: np.random.Generator, cases: int = 8) -> list[CheckResult]:
    worst = 0.0
    site_mismatch = 0
    for case in range(cases):
        shape = tuple(int(s) for s in rng.integers(3, 9, 3))
        grid = _random_grid(rng, shape, 3, 0.2)
        stride = 1 if case % 2 == 0 else 2
        mode = "subm" if stride == 1 and case % 4 == 0 else "strided"
        layer = SparseConvLayer.random(3, 4, rng, stride, mode)
        out = sparse_conv_forward(grid, layer)
        dense, active = grid.to_dense()
        want = oracles.dense_conv3d(dense, layer.weight, layer.bias, stride)
        sites = oracles.dense_active(active, stride, mode == "subm")
        got_dense, got_active = out.to_dense()
        site_mismatch += int(np.count_nonzero(sites != got_active))
        if len(out):
            ix, iy, iz = out.coords.T
            worst = max(worst, float(np.abs(out.features - want[ix, iy, iz]).max()))
    grid = _random_grid(rng, (6, 5, 4), 3, 0.3)
    ident = sparse_conv_forward(grid, SparseConvLayer.identity(3))
    identity_err = float(np.abs(ident.features - grid.features).max()) + float(np.any(ident.coords != grid.coords))
    return [
        _check("sparse conv vs dense oracle", worst, 1e-5, f"{cases} grids"),
        _check("sparse conv active sites", site_mismatch, 0),
        _check("sparse conv identity kernel", identity_err, 0.0),
    ]


def _attn_params(cfg: PipelineConfig, rng: np.random.Generator, channels: int = 4) -> DeformableAttnParams:
    heads = cfg.fusion_cfg.heads
    channels = max(channels, heads) // heads * heads
    return DeformableAttnParams.random(channels, rng, heads, cfg.fusion_cfg.points, offset_scale=1.5)


def check_attention(cfg: PipelineConfig, rng: np.random.Generator) -> list[CheckResult]:
    values = rng.normal(size=(5, 6, 3))
    locs = rng.uniform(-1.5, 6.5, (200, 2))
    got = bilinear_sample_many(values, locs)
    want = np.array([oracles.bilinear_loop(values, a, b) for a, b in locs])
    bil = float(np.abs(got - want).max())

    p = DeformableAttnParams.uniform(4, cfg.fusion_cfg.heads, cfg.fusion_cfg.points)
    vmap = rng.normal(size=(6, 6, 4))
    refs = rng.uniform(0, 5, (50, 2))
    out = deformable_attention_many(rng.normal(size=(50, 4)), refs, vmap, p)
    uni = float(np.abs(out - bilinear_sample_many(vmap, refs)).max())

    params = _attn_params(cfg, rng)
    C = params.channels
    q = rng.normal(size=(3, C))
    refs = rng.uniform(0.3, 3.7, (3, 2))
    vmap = rng.normal(size=(5, 5, C))
    gout = rng.normal(size=(3, C))
    _, grads = deformable_attention_grad(q, refs, vmap, params, gout)
    worst = 0.0
    arrays = params.arrays()
    for name in ("q_w", "off_b", "att_w", "val_w", "out_b"):

        def f(x, name=name):
            return float(np.sum(gout * deformable_attention_many(q, refs, vmap, params.with_arrays(**{name: x}))))

        worst = max(worst, oracles.relative_error(grads[name], oracles.central_difference(f, arrays[name])))
    fq = oracles.central_difference(lambda x: float(np.sum(gout * deformable_attention_many(x, refs, vmap, params))), q)
    worst = max(worst, oracles.relative_error(grads["query"], fq))
    return [
        _check("bilinear sampling vs oracle", bil, 1e-12),
        _check("uniform attention equals point sample", uni, 1e-9),
        _check("deformable attention gradient", worst, 1e-4),
    ]


def check_vsa_passthrough(cfg: PipelineConfig, rng: np.random.Generator, maps: int = 50) -> CheckResult:
    violations = 0
    for _ in range(maps):
        params = _attn_params(cfg, rng)
        C = params.channels
        f_b = BevFeatureMap(rng.normal(size=(6, 5, C)))
        f_v = BevFeatureMap(rng.normal(size=(6, 5, C)), rng.uniform(size=(6, 5)) < 0.4)
        out = vsa_fuse(f_v, f_b, params)
        inv = ~f_v.valid
        violations += int(np.count_nonzero(out.features[inv].view(np.uint64) != f_b.features[inv].view(np.uint64)))
    return _check("voxel attention leaves invalid cells unchanged", violations, 0, f"{maps} maps")


def check_dca_normalization(cfg: PipelineConfig, rig: CameraRig, rng: np.random.Generator) -> CheckResult:
    cam = rig[0]
    spec = VoxelGridSpec((0.0, 12.0), (-6.0, 6.0), (-1.0, 3.0), 2.0, 2.0)
    refs = pillar_reference_points(spec, 3)
    params = _attn_params(cfg, rng)
    C = params.channels
    q = BevFeatureMap(rng.normal(size=spec.shape[:2] + (C,)))
    fd = rng.normal(size=(cam.intrinsics.height, cam.intrinsics.width, C))
    one = dca_fuse(q, [fd], CameraRig((cam,)), refs, params)
    two = dca_fuse(q, [fd, fd], CameraRig((cam, cam)), refs, params)
    return _check("depth attention camera normalization", float(np.abs(one.features - two.features).max()), 1e-9)


def check_container(rng: np.random.Generator) -> CheckResult:
    tensors = {"a": rng.normal(size=(2, 3)).astype(np.float32), "b.c": np.float32(rng.normal(size=(4, 1, 2))), "s": np.float32(3.5)}
    back = decode_tensors(encode_tensors(tensors))
    err = max(float(np.abs(back[k] - np.asarray(v)).max()) for k, v in tensors.items())
    err += float(list(back) != list(tensors))
    return _check("tensor container round trip", err, 0.0)


def check_config(cfg: PipelineConfig) -> CheckResult:
    return _check("config round trip", float(parse_config(format_config(cfg)) != cfg), 0.0)


def check_synthetic_logits(cfg: PipelineConfig, rng: np.random.Generator) -> CheckResult:
    K = cfg.binning.K
    t = rng.integers(0, K, 200)
    d_c, _ = decode_depth(ordinal_softmax(ordinal_logits_for_targets(t, K, cfg.p_hit)), cfg.binning)
    return _check("synthetic logits decode to their targets", int(np.count_nonzero(d_c != t)), 0, f"K={K}")


def run_checks(cfg: PipelineConfig) -> list[CheckResult]:
    """Run every check; a check that raises is reported as a failure, not propagated."""
    rng = np.random.default_rng(cfg.seed)
    results: list[CheckResult] = []

    def guarded(name: str, fn: Callable[[], CheckResult | list[CheckResult]]) -> None:
        try:
            r = fn()
        except OABevError as exc:
            results.append(CheckResult(name, False, math.nan, 0.0, f"{exc.code}: {exc}"))
            return
        except Exception as exc:  # noqa: BLE001 - a crash is a failed property
            results.append(CheckResult(name, False, math.nan, 0.0, f"{type(exc).__name__}: {exc}"))
            traceback.print_exc()
            return
        results.extend(r if isinstance(r, list) else [r])

    rig_box: list[CameraRig] = []

    def build_rig() -> CheckResult:
        rig_box.append(cfg.load_rig())
        return CheckResult("rig construction", True, 0.0, 0.0, f"{len(rig_box[0])} cameras")

    guarded("rig construction", build_rig)
    if rig_box:
        rig = rig_box[0]
        guarded("geometry round trip", lambda: check_rig_round_trip(rig, rng))
        guarded("rig file round trip", lambda: check_rig_file(rig))
        guarded("depth attention camera normalization", lambda: check_dca_normalization(cfg, rig, rng))
    guarded("LID", lambda: check_lid(cfg, rng))
    guarded("ordinal decode", lambda: check_decode(cfg, rng))
    guarded("depth distribution", lambda: check_distribution(cfg, rng))
    guarded("synthetic logits", lambda: check_synthetic_logits(cfg, rng))
    guarded("ordinal loss", lambda: check_loss(cfg, rng))
    guarded("sparse conv", lambda: check_sparse_conv(rng))
    guarded("deformable attention", lambda: check_attention(cfg, rng))
    guarded("voxel attention pass-through", lambda: check_vsa_passthrough(cfg, rng))
    guarded("tensor container", lambda: check_container(rng))
    guarded("config round trip", lambda: check_config(cfg))
    return results
