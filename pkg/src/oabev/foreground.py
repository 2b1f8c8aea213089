"""Foreground pixel selection from 2D boxes and object-level depth targets."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .depth_bins import LidBinning, clamped_bin_index
from .errors import ConfigurationError, ShapeError

log = logging.getLogger(__name__)

NO_OWNER = -1


@dataclass(frozen=True)
class BBox2D:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    object_id: int
    object_center_depth: float

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ConfigurationError(f"degenerate 2D box {self}")
        if not self.object_center_depth > 0:
            raise ConfigurationError(f"object {self.object_id}: center depth must be positive")

    def clipped(self, width: int, height: int) -> "BBox2D | None":
        x0, x1 = max(self.x_min, 0.0), min(self.x_max, float(width))
        y0, y1 = max(self.y_min, 0.0), min(self.y_max, float(height))
        if not (x0 < x1 and y0 < y1):
            return None
        return BBox2D(x0, y0, x1, y1, self.object_id, self.object_center_depth)


@dataclass
class ForegroundMask:
    """Per-pixel foreground flags and owning object ids, arrays indexed ``[v, u]``."""

    flags: NDArray[np.bool_]
    owner: NDArray[np.int64]
    skipped_boxes: int = 0

    @property
    def n_foreground(self) -> int:
        return int(np.count_nonzero(self.flags))

    @property
    def shape(self) -> tuple[int, int]:
        return self.flags.shape


@dataclass
class DepthTargets:
    """Target bin per pixel; ``-1`` where the pixel is not foreground."""

    bins: NDArray[np.int64]
    n_clamped: int = 0
    valid: NDArray[np.bool_] = field(init=False)

    def __post_init__(self) -> None:
        self.valid = self.bins >= 0


def _pixel_span(lo: float, hi: float, size: int) -> tuple[int, int]:
    """Integer pixel centers c with lo <= c < hi, as a half-open index range."""
    start = max(int(np.ceil(lo)), 0)
    stop = min(int(np.ceil(hi)), size)
    return start, max(start, stop)


def select_foreground(boxes: Sequence[BBox2D], image_size: tuple[int, int]) -> ForegroundMask:
    """Flag every pixel whose center lies in a box.

    Where boxes overlap the nearer object (smaller center depth, then smaller
    object id) owns the pixel, independent of list order.
    """
    H, W = image_size
    flags = np.zeros((H, W), dtype=bool)
    owner = np.full((H, W), NO_OWNER, dtype=np.int64)
    skipped = 0
    # Paint far-to-near so the nearest owner is written last.
    order = sorted(boxes, key=lambda b: (b.object_center_depth, b.object_id), reverse=True)
    for box in order:
        clip = box.clipped(W, H)
        if clip is None:
            skipped += 1
            log.debug("box of object %d lies outside the image; skipped", box.object_id)
            continue
        u0, u1 = _pixel_span(clip.x_min, clip.x_max, W)
        v0, v1 = _pixel_span(clip.y_min, clip.y_max, H)
        if u0 == u1 or v0 == v1:
            continue
        flags[v0:v1, u0:u1] = True
        owner[v0:v1, u0:u1] = box.object_id
    return ForegroundMask(flags=flags, owner=owner, skipped_boxes=skipped)


def make_depth_targets(mask: ForegroundMask, boxes: Sequence[BBox2D], binning: LidBinning) -> DepthTargets:
    """Every foreground pixel inherits the center-depth bin of its owning object."""
    depth_of = {b.object_id: b.object_center_depth for b in boxes}
    owners = np.unique(mask.owner[mask.flags])
    missing = [int(o) for o in owners if int(o) not in depth_of]
    if missing:
        raise ConfigurationError(f"mask references objects without boxes: {missing}")
    bins = np.full(mask.shape, -1, dtype=np.int64)
    n_clamped = 0
    for oid in owners:
        l, clamped = clamped_bin_index(depth_of[int(oid)], binning)
        sel = mask.flags & (mask.owner == oid)
        bins[sel] = l
        if clamped:
            n_clamped += int(np.count_nonzero(sel))
    if n_clamped:
        log.info("%d foreground pixels had object depths outside the binning range", n_clamped)
    return DepthTargets(bins=bins, n_clamped=n_clamped)


# --- Box file: one box per line ------------------------------------------
#   camera_index x_min y_min x_max y_max object_id center_depth


def parse_boxes(text: str) -> dict[int, list[BBox2D]]:
    out: dict[int, list[BBox2D]] = defaultdict(list)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ConfigurationError(f"box file line {lineno}: expected 7 fields, got {len(parts)}")
        try:
            cam = int(parts[0])
            x0, y0, x1, y1 = (float(p) for p in parts[1:5])
            oid = int(parts[5])
            depth = float(parts[6])
        except ValueError as exc:
            raise ConfigurationError(f"box file line {lineno}: {exc}") from exc
        out[cam].append(BBox2D(x0, y0, x1, y1, oid, depth))
    return dict(out)


def format_boxes(boxes_per_camera: dict[int, Sequence[BBox2D]]) -> str:
    lines = []
    for cam in sorted(boxes_per_camera):
        for b in boxes_per_camera[cam]:
            lines.append(
                f"{cam} {b.x_min!r} {b.y_min!r} {b.x_max!r} {b.y_max!r} {b.object_id} {b.object_center_depth!r}"
            )
    return "\n".join(lines) + ("\n" if lines else "")


def load_boxes(path: str | Path) -> dict[int, list[BBox2D]]:
    return parse_boxes(Path(path).read_text())


def check_mask_shape(mask: ForegroundMask, shape: tuple[int, int]) -> None:
    if mask.shape != tuple(shape):
        raise ShapeError(f"mask shape {mask.shape} does not match {tuple(shape)}")
