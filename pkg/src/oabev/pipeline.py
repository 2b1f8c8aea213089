"""End-to-end driver: synthetic scene to fused BEV features, metrics and artifacts."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from scipy.ndimage import gaussian_filter

from .camera import CameraRig, from_ego
from .config import PipelineConfig
from .depth_bins import decode_depth, ordinal_logits_for_targets, ordinal_softmax
from .foreground import BBox2D, ForegroundMask, make_depth_targets, select_foreground
from .fusion import FusionStack, fuse, pillar_reference_points, pool_depth_features
from .io import encode_pgm, save_tensors, write_metrics
from .losses import LossBreakdown, combine_losses, ordinal_depth_loss
from .pseudo3d import PseudoPointCloud, VoxelGridSpec, generate_pseudo_points, voxelize
from .scenegen import SyntheticScene, bev_ground_truth, generate_scene, parse_boxes_3d
from .voxelnet import BevFeatureMap, VoxelEncoder, encode_voxels, flatten_z

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
OCCUPANCY_FILE = "occupancy.pgm"
TENSORS_FILE = "tensors.oabt"
POINTS_FILE = "points.bin"
ARTIFACTS = (METRICS_FILE, OCCUPANCY_FILE, TENSORS_FILE, POINTS_FILE)

# Weight of the lateral (along-image-plane) constraint relative to the depth-plane one.
LATERAL_WEIGHT = 1e-2
TRUNCATED_LATERAL_WEIGHT = 1e-4


@dataclass
class CameraFrame:
    """Per-camera intermediate products."""

    boxes: list[BBox2D]
    mask: ForegroundMask
    depth: NDArray[np.float64]
    logits: NDArray[np.float64]
    probs: NDArray[np.float64]
    bins: NDArray[np.int64]


@dataclass
class PipelineResult:
    config: PipelineConfig
    scene: SyntheticScene
    frames: list[CameraFrame]
    cloud: PseudoPointCloud
    n_foreground: int
    containment: float
    centroid_error: dict[int, float]
    sharpening_before: dict[int, float]
    sharpening_after: dict[int, float]
    losses: LossBreakdown | None
    f_b: BevFeatureMap | None
    f_v: BevFeatureMap
    fused: BevFeatureMap | None
    gt_occupancy: NDArray[np.bool_]
    dropped_points: int
    metrics: list[tuple[str, int | None, float]] = field(default_factory=list)

    @property
    def n_points(self) -> int:
        return len(self.cloud)

    @property
    def in_range_fraction(self) -> float:
        return float(np.mean(self.cloud.in_range)) if len(self.cloud) else 0.0


def load_scene(cfg: PipelineConfig, rig: CameraRig, grid: VoxelGridSpec) -> SyntheticScene:
    if cfg.scene_boxes:
        boxes = parse_boxes_3d(Path(cfg.scene_boxes).read_text())
        return SyntheticScene(rig=rig, boxes=boxes, seed=cfg.seed, grid=grid)
    return generate_scene(cfg.scene, cfg.seed, rig, grid)


def _camera_frame(scene: SyntheticScene, i: int, cfg: PipelineConfig) -> CameraFrame:
    cam = scene.rig[i]
    H, W = cam.intrinsics.height, cam.intrinsics.width
    boxes = scene.boxes_2d[i]
    mask = select_foreground(boxes, (H, W))
    targets = make_depth_targets(mask, boxes, cfg.binning)
    K = cfg.binning.K
    logits = ordinal_logits_for_targets(np.maximum(targets.bins, 0), K, cfg.p_hit, targets.valid)
    probs = ordinal_softmax(logits)
    bins, decoded = decode_depth(probs, cfg.binning)
    if cfg.mode == "oracle-depth":
        depth = scene.depth_maps[i]
    else:
        depth = np.where(mask.flags, decoded, 0.0)
    return CameraFrame(boxes, mask, depth, logits, probs, bins)


def containment_rate(scene: SyntheticScene, cloud: PseudoPointCloud, margin: float) -> float:
    """Fraction of points inside their owner's box grown by ``margin`` on every side."""
    if not len(cloud):
        return 1.0
    inside = np.zeros(len(cloud), dtype=bool)
    for box in scene.boxes:
        sel = cloud.object_id == box.object_id
        if np.any(sel):
            inside[sel] = box.contains(cloud.points[sel], margin=margin)
    return float(np.mean(inside))


def _object_depth(frame: CameraFrame, box: BBox2D, cfg: PipelineConfig) -> float:
    if cfg.mode == "oracle-depth":
        return box.object_center_depth
    sel = frame.mask.flags & (frame.mask.owner == box.object_id)
    if not np.any(sel):
        return box.object_center_depth
    return float(np.median(frame.depth[sel]))


def estimate_centroids(
    scene: SyntheticScene, frames: list[CameraFrame], cloud: PseudoPointCloud, cfg: PipelineConfig
) -> dict[int, NDArray[np.float64]]:
    """Multi-view BEV object centers.

    Each camera seeing an object contributes the plane ``forward . (c - t) = d``
    (``d`` the object's depth) plus a weak pull toward the viewing ray through
    the middle of its points. With two or more views the planes intersect
    near the true center; the ray term only settles the remaining freedom.
    """
    rows: dict[int, list[tuple[NDArray, NDArray, NDArray]]] = {}
    for i, (cam, frame) in enumerate(zip(scene.rig, frames)):
        intr, pose = cam
        R, t = pose.rotation, pose.translation
        for box in frame.boxes:
            sel = (cloud.camera_index == i) & (cloud.object_id == box.object_id)
            if np.any(sel):
                p = from_ego(cloud.points[sel], pose)
                slope = p[:, 0] / p[:, 2]
                mid = 0.5 * (p[slope.argmin()] + p[slope.argmax()])
                ray = R @ (mid / np.linalg.norm(mid))
            else:
                u, v = 0.5 * (box.x_min + box.x_max), 0.5 * (box.y_min + box.y_max)
                ray = R @ np.array([(u - intr.c_x) / intr.f_x, (v - intr.c_y) / intr.f_y, 1.0])
                ray /= np.linalg.norm(ray)
            truncated = box.x_min <= 0.0 or box.x_max >= intr.width
            lateral = np.eye(3) - np.outer(ray, ray)
            A = np.vstack([R[:, 2], lateral])
            b = np.concatenate([[R[:, 2] @ t + _object_depth(frame, box, cfg)], lateral @ t])
            w = np.array([1.0] + [TRUNCATED_LATERAL_WEIGHT if truncated else LATERAL_WEIGHT] * 3)
            rows.setdefault(box.object_id, []).append((A, b, w))
    out = {}
    for oid, parts in sorted(rows.items()):
        sw = [np.sqrt(w) for _, _, w in parts]
        A = np.vstack([a * s[:, None] for (a, _, _), s in zip(parts, sw)])
        b = np.concatenate([bb * s for (_, bb, _), s in zip(parts, sw)])
        out[oid] = np.linalg.lstsq(A, b, rcond=None)[0][:2]
    return out


def _cell_of(xy: NDArray, spec: VoxelGridSpec) -> tuple[int, int] | None:
    ix = int(math.floor((xy[0] - spec.x_range[0]) / spec.cell_size_xy))
    iy = int(math.floor((xy[1] - spec.y_range[0]) / spec.cell_size_xy))
    nx, ny, _ = spec.shape
    if 0 <= ix < nx and 0 <= iy < ny:
        return ix, iy
    return None


def synthesize_bev(
    scene: SyntheticScene, spec: VoxelGridSpec, channels: int, seed: int, smooth: float, bump: float, blur: float
) -> BevFeatureMap:
    """Seeded smooth random field plus a Gaussian bump at every object center.

    The field is scaled to unit RMS cell norm; each bump adds ``bump`` times a
    shared random unit direction, spread with standard deviation ``blur`` cells.
    """
    rng = np.random.default_rng([seed, 0xB3])
    nx, ny, _ = spec.shape
    field_ = gaussian_filter(rng.normal(size=(nx, ny, channels)), sigma=(smooth, smooth, 0), mode="nearest")
    rms = math.sqrt(float(np.mean(np.sum(field_**2, axis=-1)))) or 1.0
    field_ /= rms
    direction = rng.normal(size=channels)
    direction /= np.linalg.norm(direction)
    heat = np.zeros((nx, ny))
    for box in scene.boxes:
        cell = _cell_of(np.asarray(box.center[:2]), spec)
        if cell is not None:
            heat[cell] += 1.0
    if blur > 0:
        heat = gaussian_filter(heat, sigma=blur, mode="constant")
        peak = heat.max()
        if peak > 0:
            heat /= peak
    return BevFeatureMap(field_ + bump * heat[..., None] * direction)


def sharpening_scores(bev: BevFeatureMap, scene: SyntheticScene, spec: VoxelGridSpec, occupied: NDArray) -> dict[int, float]:
    """Feature norm at each object's center cell over the mean norm of unoccupied cells."""
    norms = np.linalg.norm(bev.features, axis=-1)
    background = norms[~occupied]
    denom = float(background.mean()) if background.size else 1.0
    out = {}
    for box in scene.boxes:
        cell = _cell_of(np.asarray(box.center[:2]), spec)
        if cell is not None:
            out[box.object_id] = float(norms[cell]) / denom if denom > 0 else math.inf
    return out


def load_encoder(cfg: PipelineConfig) -> VoxelEncoder:
    if cfg.encoder_params:
        from .io import load_tensors

        return VoxelEncoder.from_tensors(load_tensors(cfg.encoder_params), relu=cfg.relu)
    return VoxelEncoder.default(seed=cfg.param_seed, relu=cfg.relu)


def load_fusion(cfg: PipelineConfig, voxel_channels: int) -> FusionStack:
    fc = cfg.fusion_cfg
    if cfg.fusion_params:
        from .io import load_tensors

        return FusionStack.from_tensors(load_tensors(cfg.fusion_params), fc.layers, fc.heads, fc.points, fc.n_ref)
    return FusionStack.default(
        voxel_channels, 2 * cfg.binning.K, fc.channels, fc.layers, fc.heads, fc.points, fc.n_ref, seed=cfg.param_seed
    )


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    rig = cfg.load_rig()
    grid = cfg.pipeline_grid
    scene = load_scene(cfg, rig, grid)
    frames = [_camera_frame(scene, i, cfg) for i in range(len(rig))]
    n_fg = sum(f.mask.n_foreground for f in frames)
    cloud = PseudoPointCloud.concatenate(
        [generate_pseudo_points(f.depth, f.mask, rig[i], i, grid) for i, f in enumerate(frames)]
    )
    voxels = voxelize(cloud, grid)
    encoder = load_encoder(cfg)
    encoded = encode_voxels(voxels, encoder)
    f_v = flatten_z(encoded)
    bev_spec = encoded.spec if encoded.spec is not None else grid.downsampled(encoder.total_stride)

    diagonal = float(np.linalg.norm(grid.cell))
    containment = containment_rate(scene, cloud, diagonal)
    truth_occ, truth_xy = bev_ground_truth(scene, grid)
    estimates = estimate_centroids(scene, frames, cloud, cfg)
    centroid_error = {oid: float(np.linalg.norm(xy - truth_xy[oid])) for oid, xy in estimates.items()}

    losses = None
    if n_fg:
        l_dep = sum(
            ordinal_depth_loss(f.probs, make_depth_targets(f.mask, f.boxes, cfg.binning), f.mask)[0] * f.mask.n_foreground
            for f in frames if f.mask.n_foreground
        ) / n_fg
        losses = combine_losses(cfg.surrogates.l3d, cfg.surrogates.l2d, l_dep, cfg.weights, n_fg)

    f_b = fused = None
    before: dict[int, float] = {}
    after: dict[int, float] = {}
    if cfg.fusion:
        fc = cfg.fusion_cfg
        f_b = synthesize_bev(scene, bev_spec, fc.channels, cfg.seed, fc.fb_smooth, fc.fb_bump, fc.fb_blur)
        stack = load_fusion(cfg, f_v.channels)
        refs = pillar_reference_points(bev_spec, stack.n_ref)
        f_d = [pool_depth_features(f.logits, fc.feature_stride) for f in frames]
        fused = fuse(f_b, f_v, f_d, rig, stack, refs, fc.feature_stride)
        bev_occ, _ = bev_ground_truth(scene, bev_spec)
        before = sharpening_scores(f_b, scene, bev_spec, bev_occ)
        after = sharpening_scores(fused, scene, bev_spec, bev_occ)

    result = PipelineResult(
        config=cfg, scene=scene, frames=frames, cloud=cloud, n_foreground=n_fg, containment=containment,
        centroid_error=centroid_error, sharpening_before=before, sharpening_after=after, losses=losses,
        f_b=f_b, f_v=f_v, fused=fused, gt_occupancy=truth_occ, dropped_points=voxels.dropped_points,
    )
    result.metrics = collect_metrics(result)
    return result


def collect_metrics(r: PipelineResult) -> list[tuple[str, int | None, float]]:
    rows: list[tuple[str, int | None, float]] = [
        ("n_foreground", None, r.n_foreground),
        ("n_points", None, r.n_points),
        ("in_range_fraction", None, r.in_range_fraction),
        ("dropped_points", None, r.dropped_points),
        ("containment_rate", None, r.containment),
        ("n_objects", None, len(r.scene.boxes)),
    ]
    if r.centroid_error:
        rows.append(("centroid_error_max", None, max(r.centroid_error.values())))
    if r.losses is not None:
        rows += [
            ("loss_3d", None, r.losses.l_3d),
            ("loss_2d", None, r.losses.l_2d),
            ("loss_depth", None, r.losses.l_dep),
            ("loss_total", None, r.losses.total),
        ]
    if r.sharpening_before:
        gains = [r.sharpening_after[o] > r.sharpening_before[o] for o in r.sharpening_before]
        rows.append(("sharpened_fraction", None, float(np.mean(gains))))
    for oid in sorted(r.centroid_error):
        rows.append(("centroid_error", oid, r.centroid_error[oid]))
    for oid in sorted(r.sharpening_before):
        rows.append(("sharpening_before", oid, r.sharpening_before[oid]))
        rows.append(("sharpening_after", oid, r.sharpening_after[oid]))
    return rows


def occupancy_image(r: PipelineResult) -> NDArray[np.uint8]:
    """Three panels: ground truth, pseudo-point occupancy, overlay (both 255, truth only 160, points only 80).

    Rows run along +x from the top, columns along +y from the left.
    """
    grid = r.config.pipeline_grid
    nx, ny, _ = grid.shape
    pts = np.zeros((nx, ny), dtype=bool)
    if len(r.cloud):
        idx, ok = grid.voxel_index(r.cloud.points)
        pts[idx[ok, 0], idx[ok, 1]] = True
    gt = r.gt_occupancy
    overlay = np.where(gt & pts, 255, np.where(gt, 160, np.where(pts, 80, 0)))
    gap = np.full((nx, 2), 40)
    return np.hstack([gt * 255, gap, pts * 255, gap, overlay])[::-1].astype(np.uint8)


def tensor_dump(r: PipelineResult) -> dict[str, NDArray]:
    out: dict[str, NDArray] = {
        "gt.occupancy": r.gt_occupancy.astype(np.float32),
        "bev.voxel": r.f_v.features,
        "bev.voxel.valid": r.f_v.valid.astype(np.float32),
    }
    if r.f_b is not None and r.fused is not None:
        out["bev.input"] = r.f_b.features
        out["bev.fused"] = r.fused.features
    for i, f in enumerate(r.frames):
        out[f"camera.{i}.depth"] = f.depth
        out[f"camera.{i}.foreground"] = f.mask.flags.astype(np.float32)
    return out


def write_artifacts(r: PipelineResult, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(out / METRICS_FILE, r.metrics)
    (out / OCCUPANCY_FILE).write_bytes(encode_pgm(occupancy_image(r)))
    save_tensors(out / TENSORS_FILE, tensor_dump(r))
    r.cloud.write(out / POINTS_FILE)
    return out


def run(cfg: PipelineConfig, out_dir: str | Path | None = None) -> PipelineResult:
    """Run the pipeline and write its artifacts to ``out_dir`` (default: the config's)."""
    result = run_pipeline(cfg)
    write_artifacts(result, out_dir if out_dir is not None else cfg.out)
    return result
