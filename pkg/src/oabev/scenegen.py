"""Synthetic multi-camera scenes with exact depth, 2D box and BEV oracles.

Objects are opaque oriented cuboids resting on the ground plane (z = 0 in
the ego frame). Depth maps come from analytic ray/slab intersection, so the
oracles are exact up to floating point.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.typing import NDArray

from .camera import Camera, CameraRig, from_ego
from .errors import BoundsError, ConfigurationError, GenerationError
from .foreground import BBox2D
from .pseudo3d import VoxelGridSpec

log = logging.getLogger(__name__)

NO_DEPTH = 0.0
NEAR_PLANE = 1e-3

# Corner sign pattern; edges connect corners differing in exactly one sign.
_SIGNS = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
_EDGES = [(a, b) for a in range(8) for b in range(a + 1, 8) if np.count_nonzero(_SIGNS[a] != _SIGNS[b]) == 1]


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # length (along heading), width, height
    yaw: float
    object_id: int

    def __post_init__(self) -> None:
        if len(self.center) != 3 or len(self.size) != 3:
            raise ConfigurationError("box center and size need three components")
        if not all(s > 0 for s in self.size):
            raise ConfigurationError(f"box {self.object_id}: sizes must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        object.__setattr__(self, "yaw", _wrap_angle(float(self.yaw)))

    @property
    def rotation(self) -> NDArray[np.float64]:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    @property
    def half(self) -> NDArray[np.float64]:
        return np.asarray(self.size) / 2.0

    def corners(self) -> NDArray[np.float64]:
        """(8, 3) ego-frame corners."""
        return (_SIGNS * self.half) @ self.rotation.T + np.asarray(self.center)

    def footprint(self) -> NDArray[np.float64]:
        """(4, 2) BEV rectangle corners, counter-clockwise."""
        l, w = self.half[:2]
        local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]])
        return local @ self.rotation[:2, :2].T + np.asarray(self.center[:2])

    def to_local(self, points: NDArray) -> NDArray[np.float64]:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.center)) @ self.rotation

    def contains(self, points: NDArray, margin: float = 0.0) -> NDArray[np.bool_]:
        local = self.to_local(np.atleast_2d(points))
        return np.all(np.abs(local) <= self.half + margin, axis=1)

    def surface_distance(self, points: NDArray) -> NDArray[np.float64]:
        """Unsigned distance from each point to the cuboid's surface."""
        local = np.abs(self.to_local(np.atleast_2d(points))) - self.half
        outside = np.linalg.norm(np.maximum(local, 0.0), axis=1)
        inside = np.minimum(local.max(axis=1), 0.0)
        return np.abs(outside + inside)


def _separated(a: NDArray, b: NDArray) -> bool:
    """Separating-axis test for two convex polygons; touching counts as separated."""
    for poly in (a, b):
        edges = np.roll(poly, -1, axis=0) - poly
        for ex, ey in edges:
            axis = np.array([-ey, ex])
            pa, pb = a @ axis, b @ axis
            if pa.max() <= pb.min() or pb.max() <= pa.min():
                return True
    return False


def rects_overlap(a: NDArray, b: NDArray) -> bool:
    return not _separated(a, b)


@dataclass(frozen=True)
class SceneSpec:
    box_count: int = 8
    length_range: tuple[float, float] = (3.6, 4.8)
    width_range: tuple[float, float] = (1.7, 2.0)
    height_range: tuple[float, float] = (1.4, 1.8)
    range_scale: float = 0.5
    min_distance: float = 6.0
    min_gap: float = 1.0
    max_retries: int = 2000

    def __post_init__(self) -> None:
        if self.box_count < 0:
            raise ConfigurationError("box_count must be nonnegative")
        for name in ("length_range", "width_range", "height_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigurationError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if not 0 < self.range_scale <= 1:
            raise ConfigurationError("range_scale must lie in (0, 1]")


@dataclass
class SyntheticScene:
    rig: CameraRig
    boxes: list[Box3D]
    seed: int | None = None
    grid: VoxelGridSpec = field(default_factory=VoxelGridSpec)

    @cached_property
    def depth_maps(self) -> list[NDArray[np.float64]]:
        return [render_depth(self, i) for i in range(len(self.rig))]

    @cached_property
    def boxes_2d(self) -> list[list[BBox2D]]:
        return [oracle_boxes_2d(self, i) for i in range(len(self.rig))]

    def box_by_id(self) -> dict[int, Box3D]:
        return {b.object_id: b for b in self.boxes}


def generate_scene(spec: SceneSpec, seed: int, rig: CameraRig, grid: VoxelGridSpec | None = None) -> SyntheticScene:
    """Rejection-sample non-overlapping boxes inside the (scaled) perception range."""
    if grid is None:
        grid = VoxelGridSpec().scaled(spec.range_scale)
    rng = np.random.default_rng(seed)
    boxes: list[Box3D] = []
    footprints: list[NDArray] = []
    tries = 0
    while len(boxes) < spec.box_count:
        if tries >= spec.max_retries:
            raise GenerationError(
                f"placed only {len(boxes)} of {spec.box_count} boxes after {spec.max_retries} attempts"
            )
        tries += 1
        l = rng.uniform(*spec.length_range)
        w = rng.uniform(*spec.width_range)
        h = rng.uniform(*spec.height_range)
        yaw = rng.uniform(-math.pi, math.pi)
        reach = math.hypot(l, w) / 2.0
        x = rng.uniform(grid.x_range[0] + reach, grid.x_range[1] - reach)
        y = rng.uniform(grid.y_range[0] + reach, grid.y_range[1] - reach)
        if math.hypot(x, y) - reach < spec.min_distance:
            continue
        if h > grid.z_range[1]:
            continue
        cand = Box3D((x, y, h / 2.0), (l, w, h), yaw, len(boxes))
        grown = Box3D(cand.center, (l + spec.min_gap, w + spec.min_gap, h), yaw, -1).footprint()
        if any(rects_overlap(grown, fp) for fp in footprints):
            continue
        boxes.append(cand)
        footprints.append(cand.footprint())
    return SyntheticScene(rig=rig, boxes=boxes, seed=seed, grid=grid)


def pixel_rays(cam: Camera) -> NDArray[np.float64]:
    """(H, W, 3) camera-frame ray directions with unit z, through pixel centers."""
    intr = cam.intrinsics
    u = np.arange(intr.width, dtype=np.float64)
    v = np.arange(intr.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    return np.stack([(uu - intr.c_x) / intr.f_x, (vv - intr.c_y) / intr.f_y, np.ones_like(uu)], axis=-1)


def ray_box_depth(origin: NDArray, dirs: NDArray, box: Box3D) -> NDArray[np.float64]:
    """Ray parameter of the first entry into ``box`` (slab method); ``inf`` on a miss.

    ``dirs`` is (..., 3) in the ego frame; rays start at ``origin``.
    """
    o = box.to_local(origin)
    d = dirs @ box.rotation
    half = box.half
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    parallel = d == 0
    inside_slab = np.abs(o) <= half
    lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), hi)
    t_near = lo.max(axis=-1)
    t_far = hi.min(axis=-1)
    hit = (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf)


def render_depth_with_ids(scene: SyntheticScene, camera_index: int) -> tuple[NDArray, NDArray]:
    """Depth map (camera-frame z, ``NO_DEPTH`` on background) and the id of the hit box (-1 if none)."""
    if not 0 <= camera_index < len(scene.rig):
        raise BoundsError(f"camera index {camera_index} outside rig of {len(scene.rig)}")
    cam = scene.rig[camera_index]
    rays_cam = pixel_rays(cam)
    dirs = rays_cam @ cam.pose.rotation.T
    origin = cam.pose.translation
    best = np.full(rays_cam.shape[:2], np.inf)
    ids = np.full(rays_cam.shape[:2], -1, dtype=np.int64)
    for box in scene.boxes:
        # Rays have unit camera-z, so the ray parameter is the camera-frame depth.
        t = ray_box_depth(origin, dirs, box)
        closer = t < best
        best[closer] = t[closer]
        ids[closer] = box.object_id
    depth = np.where(np.isfinite(best), best, NO_DEPTH)
    return depth, ids


def render_depth(scene: SyntheticScene, camera_index: int) -> NDArray[np.float64]:
    return render_depth_with_ids(scene, camera_index)[0]


def projected_hull(box: Box3D, cam: Camera) -> tuple[float, float, float, float] | None:
    """Tight image-plane hull of the part of ``box`` in front of the camera (unclipped)."""
    intr, pose = cam
    pc = from_ego(box.corners(), pose)
    pts = []
    for a, b in _EDGES:
        za, zb = pc[a, 2], pc[b, 2]
        if za >= NEAR_PLANE:
            pts.append(pc[a])
        if zb >= NEAR_PLANE:
            pts.append(pc[b])
        if (za - NEAR_PLANE) * (zb - NEAR_PLANE) < 0:
            s = (NEAR_PLANE - za) / (zb - za)
            pts.append(pc[a] + s * (pc[b] - pc[a]))
    if not pts:
        return None
    p = np.array(pts)
    u = intr.f_x * p[:, 0] / p[:, 2] + intr.c_x
    v = intr.f_y * p[:, 1] / p[:, 2] + intr.c_y
    return float(u.min()), float(v.min()), float(u.max()), float(v.max())


def oracle_boxes_2d(scene: SyntheticScene, camera_index: int) -> list[BBox2D]:
    if not 0 <= camera_index < len(scene.rig):
        raise BoundsError(f"camera index {camera_index} outside rig of {len(scene.rig)}")
    cam = scene.rig[camera_index]
    intr = cam.intrinsics
    out = []
    for box in scene.boxes:
        center_depth = float(from_ego(np.asarray(box.center), cam.pose)[2])
        if center_depth <= 0:
            continue
        hull = projected_hull(box, cam)
        if hull is None:
            continue
        x0, y0 = max(hull[0], 0.0), max(hull[1], 0.0)
        x1, y1 = min(hull[2], float(intr.width)), min(hull[3], float(intr.height))
        if x0 < x1 and y0 < y1:
            out.append(BBox2D(x0, y0, x1, y1, box.object_id, center_depth))
    return out


def bev_ground_truth(scene: SyntheticScene, spec: VoxelGridSpec) -> tuple[NDArray[np.bool_], dict[int, NDArray]]:
    """BEV occupancy (cells overlapping any box footprint with positive area) and box centers."""
    nx, ny, _ = spec.shape
    occ = np.zeros((nx, ny), dtype=bool)
    centroids: dict[int, NDArray] = {}
    c = spec.cell_size_xy
    x0, y0 = spec.x_range[0], spec.y_range[0]
    for box in scene.boxes:
        centroids[box.object_id] = np.array(box.center[:2])
        fp = box.footprint()
        ix0 = max(int(math.floor((fp[:, 0].min() - x0) / c)), 0)
        ix1 = min(int(math.floor((fp[:, 0].max() - x0) / c)), nx - 1)
        iy0 = max(int(math.floor((fp[:, 1].min() - y0) / c)), 0)
        iy1 = min(int(math.floor((fp[:, 1].max() - y0) / c)), ny - 1)
        for ix in range(ix0, ix1 + 1):
            for iy in range(iy0, iy1 + 1):
                if occ[ix, iy]:
                    continue
                lx, ly = x0 + ix * c, y0 + iy * c
                cell = np.array([[lx, ly], [lx + c, ly], [lx + c, ly + c], [lx, ly + c]])
                if rects_overlap(cell, fp):
                    occ[ix, iy] = True
    return occ, centroids


def format_boxes_3d(boxes: list[Box3D]) -> str:
    lines = ["# object_id cx cy cz length width height yaw"]
    for b in boxes:
        vals = " ".join(repr(v) for v in (*b.center, *b.size, b.yaw))
        lines.append(f"{b.object_id} {vals}")
    return "\n".join(lines) + "\n"


def parse_boxes_3d(text: str) -> list[Box3D]:
    boxes = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ConfigurationError(f"3D box line {lineno}: expected 8 fields")
        try:
            oid, v = int(parts[0]), [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise ConfigurationError(f"3D box line {lineno}: {exc}") from exc
        if not all(math.isfinite(x) for x in v):
            raise ConfigurationError(f"3D box line {lineno}: non-finite value")
        boxes.append(Box3D(tuple(v[0:3]), tuple(v[3:6]), v[6], oid))
    return boxes
