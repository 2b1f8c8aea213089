"""Foreground pseudo-LiDAR generation and sparse voxelization."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .camera import Camera, to_ego, unproject_many
from .errors import ConfigurationError, ShapeError
from .foreground import ForegroundMask

log = logging.getLogger(__name__)

COUNT_CAP = 32
VOXEL_CHANNELS = 4

POINT_RECORD = np.dtype(
    [
        ("camera_index", "<u2"),
        ("u", "<f4"),
        ("v", "<f4"),
        ("x", "<f4"),
        ("y", "<f4"),
        ("z", "<f4"),
        ("object_id", "<u4"),
    ]
)


def _cells(lo: float, hi: float, cell: float, axis: str) -> int:
    n = (hi - lo) / cell
    count = round(n)
    if count < 1 or abs(n - count) > 1e-6:
        raise ConfigurationError(f"{axis}-range [{lo}, {hi}] is not a whole number of {cell} m cells")
    return int(count)


@dataclass(frozen=True)
class VoxelGridSpec:
    x_range: tuple[float, float] = (-51.2, 51.2)
    y_range: tuple[float, float] = (-51.2, 51.2)
    z_range: tuple[float, float] = (-5.0, 3.0)
    cell_size_xy: float = 0.8
    cell_size_z: float = 0.8

    def __post_init__(self) -> None:
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ConfigurationError(f"{name} must be increasing, got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if not (self.cell_size_xy > 0 and self.cell_size_z > 0):
            raise ConfigurationError("cell sizes must be positive")
        # Validates divisibility eagerly.
        self.shape  # noqa: B018

    @property
    def shape(self) -> tuple[int, int, int]:
        """Grid dimensions ``(nx, ny, nz)``; H_BEV and W_BEV are ``nx`` and ``ny``."""
        return (
            _cells(*self.x_range, self.cell_size_xy, "x"),
            _cells(*self.y_range, self.cell_size_xy, "y"),
            _cells(*self.z_range, self.cell_size_z, "z"),
        )

    @property
    def origin(self) -> NDArray[np.float64]:
        return np.array([self.x_range[0], self.y_range[0], self.z_range[0]])

    @property
    def cell(self) -> NDArray[np.float64]:
        return np.array([self.cell_size_xy, self.cell_size_xy, self.cell_size_z])

    def scaled(self, factor: float) -> "VoxelGridSpec":
        """Same cells, perception range multiplied by ``factor``."""
        return VoxelGridSpec(
            (self.x_range[0] * factor, self.x_range[1] * factor),
            (self.y_range[0] * factor, self.y_range[1] * factor),
            self.z_range,
            self.cell_size_xy,
            self.cell_size_z,
        )

    def downsampled(self, stride: int) -> "VoxelGridSpec":
        """Grid after an ``stride``-fold reduction; the range grows to whole coarse cells."""
        nx, ny, nz = self.shape
        ox, oy, oz = self.origin
        cxy, cz = self.cell_size_xy * stride, self.cell_size_z * stride
        return VoxelGridSpec(
            (ox, ox + math.ceil(nx / stride) * cxy),
            (oy, oy + math.ceil(ny / stride) * cxy),
            (oz, oz + math.ceil(nz / stride) * cz),
            cxy,
            cz,
        )

    def cell_centers_xy(self) -> NDArray[np.float64]:
        """(nx, ny, 2) ego-frame centers of the BEV cells."""
        nx, ny, _ = self.shape
        xs = self.x_range[0] + (np.arange(nx) + 0.5) * self.cell_size_xy
        ys = self.y_range[0] + (np.arange(ny) + 0.5) * self.cell_size_xy
        return np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)

    def voxel_index(self, points: NDArray) -> tuple[NDArray[np.int64], NDArray[np.bool_]]:
        """Per-point integer voxel coordinates and an in-range flag (half-open cells)."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        idx = np.floor((pts - self.origin) / self.cell).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.array(self.shape)), axis=1)
        return idx, inside


@dataclass
class PseudoPointCloud:
    points: NDArray[np.float64] = field(default_factory=lambda: np.zeros((0, 3)))
    camera_index: NDArray[np.int64] = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pixels: NDArray[np.float64] = field(default_factory=lambda: np.zeros((0, 2)))
    object_id: NDArray[np.int64] = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    in_range: NDArray[np.bool_] = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def concatenate(cls, clouds: list["PseudoPointCloud"]) -> "PseudoPointCloud":
        if not clouds:
            return cls()
        return cls(
            points=np.concatenate([c.points for c in clouds]),
            camera_index=np.concatenate([c.camera_index for c in clouds]),
            pixels=np.concatenate([c.pixels for c in clouds]),
            object_id=np.concatenate([c.object_id for c in clouds]),
            in_range=np.concatenate([c.in_range for c in clouds]),
        )

    def to_records(self) -> NDArray:
        rec = np.zeros(len(self), dtype=POINT_RECORD)
        rec["camera_index"] = self.camera_index
        rec["u"], rec["v"] = self.pixels[:, 0], self.pixels[:, 1]
        rec["x"], rec["y"], rec["z"] = self.points.T
        rec["object_id"] = self.object_id
        return rec

    def write(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_records().tobytes())


def read_point_records(path: str | Path) -> NDArray:
    return np.frombuffer(Path(path).read_bytes(), dtype=POINT_RECORD)


def generate_pseudo_points(
    depth_map: NDArray,
    mask: ForegroundMask,
    cam: Camera,
    camera_index: int = 0,
    spec: VoxelGridSpec | None = None,
) -> PseudoPointCloud:
    """One ego-frame point per foreground pixel with positive depth.

    Foreground pixels without a usable depth (the renderer's no-hit sentinel)
    produce no point.
    """
    depth = np.asarray(depth_map, dtype=np.float64)
    intr, pose = cam
    if depth.shape != mask.shape or depth.shape != (intr.height, intr.width):
        raise ShapeError(
            f"depth map {depth.shape}, mask {mask.shape} and image {(intr.height, intr.width)} disagree"
        )
    sel = mask.flags & (depth > 0) & np.isfinite(depth)
    v, u = np.nonzero(sel)
    if len(u) == 0:
        return PseudoPointCloud()
    pts = to_ego(unproject_many(u, v, depth[v, u], intr), pose)
    if spec is None:
        in_range = np.ones(len(pts), dtype=bool)
    else:
        _, in_range = spec.voxel_index(pts)
    return PseudoPointCloud(
        points=pts,
        camera_index=np.full(len(pts), camera_index, dtype=np.int64),
        pixels=np.stack([u, v], axis=1).astype(np.float64),
        object_id=mask.owner[v, u].astype(np.int64),
        in_range=in_range,
    )


@dataclass
class SparseVoxelGrid:
    """Active voxels stored as lexicographically sorted unique coordinates and features.

    ``coords`` is (M, 3) int64 in ``(ix, iy, iz)`` order, ``features`` is (M, C).
    """

    shape: tuple[int, int, int]
    coords: NDArray[np.int64]
    features: NDArray[np.float64]
    spec: VoxelGridSpec | None = None
    dropped_points: int = 0

    def __post_init__(self) -> None:
        self.shape = tuple(int(s) for s in self.shape)
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or len(self.features) != len(self.coords):
            raise ShapeError("features must be (M, C) matching coords")
        if len(self.coords):
            if np.any(self.coords < 0) or np.any(self.coords >= np.array(self.shape)):
                raise ShapeError("active voxel outside grid bounds")
            keys = flat_keys(self.coords, self.shape)
            if np.any(np.diff(keys) <= 0):
                order = np.argsort(keys, kind="stable")
                if np.any(np.diff(keys[order]) == 0):
                    raise ShapeError("duplicate voxel coordinates")
                self.coords = self.coords[order]
                self.features = self.features[order]

    @classmethod
    def empty(cls, shape, channels: int, spec: VoxelGridSpec | None = None) -> "SparseVoxelGrid":
        return cls(shape, np.zeros((0, 3), dtype=np.int64), np.zeros((0, channels)), spec)

    @classmethod
    def from_dense(cls, dense: NDArray, active: NDArray[np.bool_], spec: VoxelGridSpec | None = None):
        coords = np.argwhere(active)
        return cls(active.shape, coords, dense[active], spec)

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.coords)

    def to_dense(self) -> tuple[NDArray[np.float64], NDArray[np.bool_]]:
        dense = np.zeros(self.shape + (self.channels,))
        active = np.zeros(self.shape, dtype=bool)
        if len(self):
            ix, iy, iz = self.coords.T
            dense[ix, iy, iz] = self.features
            active[ix, iy, iz] = True
        return dense, active

    def as_dict(self) -> dict[tuple[int, int, int], NDArray[np.float64]]:
        return {tuple(int(c) for c in xyz): f for xyz, f in zip(self.coords, self.features)}


def flat_keys(coords: NDArray[np.int64], shape: tuple[int, int, int]) -> NDArray[np.int64]:
    c = np.asarray(coords, dtype=np.int64)
    return (c[:, 0] * shape[1] + c[:, 1]) * shape[2] + c[:, 2]


def voxelize(cloud: PseudoPointCloud, spec: VoxelGridSpec, cap: int = COUNT_CAP) -> SparseVoxelGrid:
    """Accumulate in-range points into voxels.

    Features per voxel: ``[min(count, cap) / cap, mean fractional offset x, y, z]``.
    Points from every camera share one grid, so overlapping views merge.
    """
    shape = spec.shape
    if len(cloud) == 0:
        return SparseVoxelGrid.empty(shape, VOXEL_CHANNELS, spec)
    idx, inside = spec.voxel_index(cloud.points)
    dropped = int(np.count_nonzero(~inside))
    if dropped:
        log.debug("voxelize: %d points outside the grid dropped", dropped)
    pts = cloud.points[inside]
    idx = idx[inside]
    if len(pts) == 0:
        grid = SparseVoxelGrid.empty(shape, VOXEL_CHANNELS, spec)
        grid.dropped_points = dropped
        return grid
    frac = (pts - spec.origin) / spec.cell - idx
    keys = flat_keys(idx, shape)
    uniq, inverse = np.unique(keys, return_inverse=True)
    # Sort the per-voxel summands so the float accumulation order is independent of point order.
    order = np.lexsort((frac[:, 2], frac[:, 1], frac[:, 0], inverse))
    counts = np.bincount(inverse, minlength=len(uniq)).astype(np.float64)
    sums = np.zeros((len(uniq), 3))
    np.add.at(sums, inverse[order], frac[order])
    feats = np.empty((len(uniq), VOXEL_CHANNELS))
    feats[:, 0] = np.minimum(counts, cap) / cap
    feats[:, 1:] = sums / counts[:, None]
    nyz = shape[1] * shape[2]
    coords = np.stack([uniq // nyz, (uniq // shape[2]) % shape[1], uniq % shape[2]], axis=1)
    return SparseVoxelGrid(shape, coords, feats, spec, dropped_points=dropped)
