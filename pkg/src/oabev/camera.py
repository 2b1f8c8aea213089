"""Pinhole camera model, rigid camera-to-ego poses and multi-camera rigs.

Conventions:
    - Camera frame: x right, y down, z forward (optical axis).
    - Ego frame: x forward, y left, z up, origin on the ground plane.
    - Pixel coordinates are continuous; integer (u, v) is a pixel *center*.
      A pixel is inside the image when 0 <= u < width and 0 <= v < height.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import BoundsError, ConfigurationError, InvalidDepthError

ORTHONORMAL_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    f_x: float
    f_y: float
    c_x: float
    c_y: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.f_x > 0 and self.f_y > 0):
            raise ConfigurationError(f"focal lengths must be positive, got {self.f_x}, {self.f_y}")
        if not (0 < self.c_x < self.width and 0 < self.c_y < self.height):
            raise ConfigurationError(
                f"principal point ({self.c_x}, {self.c_y}) outside image {self.width}x{self.height}"
            )

    def matrix(self) -> NDArray[np.float64]:
        return np.array([[self.f_x, 0.0, self.c_x], [0.0, self.f_y, self.c_y], [0.0, 0.0, 1.0]])

    def in_bounds(self, u, v):
        """Half-open bounds test; works on scalars and arrays."""
        return (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)


@dataclass(frozen=True)
class CameraPose:
    """Rigid camera-to-ego transform: ``p_ego = rotation @ p_cam + translation``."""

    rotation: NDArray[np.float64]
    translation: NDArray[np.float64]

    def __post_init__(self) -> None:
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise ConfigurationError("pose needs a 3x3 rotation and a 3-vector translation")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise ConfigurationError("pose contains non-finite values")
        err = np.abs(rot.T @ rot - np.eye(3)).max()
        if err > ORTHONORMAL_TOL:
            raise ConfigurationError(f"rotation is not orthonormal (max |R^T R - I| = {err:.3g})")
        if np.linalg.det(rot) <= 0:
            raise ConfigurationError("rotation has negative determinant (reflection)")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def looking_along(cls, yaw: float, position: Sequence[float], pitch: float = 0.0) -> "CameraPose":
        """Camera whose optical axis points at ``yaw`` (radians, about ego z) tilted down by ``pitch``."""
        cy, sy = math.cos(yaw), math.sin(yaw)
        cp, sp = math.cos(pitch), math.sin(pitch)
        forward = np.array([cy * cp, sy * cp, -sp])
        right = np.array([sy, -cy, 0.0])
        down = np.cross(forward, right)
        return cls(np.column_stack([right, down, forward]), np.asarray(position, dtype=np.float64))


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    pose: CameraPose

    def __iter__(self) -> Iterator:
        yield self.intrinsics
        yield self.pose


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[Camera, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        cams = tuple(self.cameras)
        if not cams:
            raise ConfigurationError("camera rig must contain at least one camera")
        for cam in cams:
            if not isinstance(cam, Camera):
                raise ConfigurationError(f"rig entries must be Camera, got {type(cam).__name__}")
        object.__setattr__(self, "cameras", cams)

    def __len__(self) -> int:
        return len(self.cameras)

    def __getitem__(self, index: int) -> Camera:
        return self.cameras[index]

    def __iter__(self) -> Iterator[Camera]:
        return iter(self.cameras)


def unproject(pixel: tuple[float, float], depth: float, intr: Intrinsics) -> NDArray[np.float64]:
    """Lift one pixel with metric depth to a camera-frame point."""
    u, v = pixel
    if not (depth > 0 and math.isfinite(depth)):
        raise InvalidDepthError(f"depth must be positive and finite, got {depth}")
    if not intr.in_bounds(u, v):
        raise BoundsError(f"pixel ({u}, {v}) outside image {intr.width}x{intr.height}")
    return np.array([(u - intr.c_x) * depth / intr.f_x, (v - intr.c_y) * depth / intr.f_y, float(depth)])


def unproject_many(u: NDArray, v: NDArray, depth: NDArray, intr: Intrinsics) -> NDArray[np.float64]:
    """Vectorized :func:`unproject`; returns an (N, 3) array of camera-frame points."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    if np.any(~(z > 0) | ~np.isfinite(z)):
        raise InvalidDepthError("all depths must be positive and finite")
    if not np.all(intr.in_bounds(u, v)):
        raise BoundsError("pixel outside image bounds")
    return np.stack([(u - intr.c_x) * z / intr.f_x, (v - intr.c_y) * z / intr.f_y, z], axis=-1)


def to_ego(point, pose: CameraPose) -> NDArray[np.float64]:
    """Camera frame -> ego frame. Accepts a single point or an (N, 3) array."""
    p = np.asarray(point, dtype=np.float64)
    return p @ pose.rotation.T + pose.translation


def from_ego(point, pose: CameraPose) -> NDArray[np.float64]:
    """Inverse of :func:`to_ego`."""
    p = np.asarray(point, dtype=np.float64)
    return (p - pose.translation) @ pose.rotation


def project(point, cam: Camera) -> Optional[tuple[float, float, float]]:
    """Project an ego point to ``(u, v, depth)``, or ``None`` on a miss.

    A miss is a point behind (or on) the camera plane or outside the image.
    """
    intr, pose = cam
    x, y, z = from_ego(point, pose)
    if not z > 0:
        return None
    u = intr.f_x * x / z + intr.c_x
    v = intr.f_y * y / z + intr.c_y
    if not intr.in_bounds(u, v):
        return None
    return float(u), float(v), float(z)


def project_many(points: NDArray, cam: Camera) -> tuple[NDArray, NDArray, NDArray, NDArray]:
    """Vectorized :func:`project`.

    Returns ``(u, v, depth, hit)``; entries where ``hit`` is False are
    meaningless and should be ignored.
    """
    intr, pose = cam
    pc = from_ego(np.atleast_2d(points), pose)
    z = pc[:, 2]
    front = z > 0
    safe_z = np.where(front, z, 1.0)
    u = intr.f_x * pc[:, 0] / safe_z + intr.c_x
    v = intr.f_y * pc[:, 1] / safe_z + intr.c_y
    hit = front & intr.in_bounds(u, v)
    return u, v, z, hit


# --- Rig description file -------------------------------------------------
#
# INI document, one section per camera:
#
#   [camera.0]
#   intrinsics = f_x f_y c_x c_y width height
#   rotation = r00 r01 r02 r10 r11 r12 r20 r21 r22
#   translation = tx ty tz


def _floats(text: str, n: int, key: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split()]
    except ValueError as exc:
        raise ConfigurationError(f"{key}: non-numeric value in {text!r}") from exc
    if len(vals) != n:
        raise ConfigurationError(f"{key}: expected {n} numbers, got {len(vals)}")
    return vals


def parse_rig(text: str) -> CameraRig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed rig file: {exc}") from exc
    sections = [s for s in parser.sections() if s.startswith("camera.")]
    try:
        sections.sort(key=lambda s: int(s.split(".", 1)[1]))
    except ValueError as exc:
        raise ConfigurationError("camera sections must be named camera.<index>") from exc
    indices = [int(s.split(".", 1)[1]) for s in sections]
    if indices != list(range(len(indices))):
        raise ConfigurationError(f"camera indices must be 0..N-1 without gaps, got {indices}")
    cams = []
    for name in sections:
        sec = parser[name]
        for key in ("intrinsics", "rotation", "translation"):
            if key not in sec:
                raise ConfigurationError(f"[{name}] missing key {key!r}")
        fx, fy, cx, cy, w, h = _floats(sec["intrinsics"], 6, f"{name}.intrinsics")
        if w != int(w) or h != int(h):
            raise ConfigurationError(f"{name}: image size must be integral")
        intr = Intrinsics(fx, fy, cx, cy, int(w), int(h))
        rot = np.array(_floats(sec["rotation"], 9, f"{name}.rotation")).reshape(3, 3)
        trans = np.array(_floats(sec["translation"], 3, f"{name}.translation"))
        cams.append(Camera(intr, CameraPose(rot, trans)))
    return CameraRig(tuple(cams))


def load_rig(path: str | Path) -> CameraRig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"rig file not found: {path}")
    return parse_rig(path.read_text())


def format_rig(rig: CameraRig) -> str:
    lines = []
    for i, (intr, pose) in enumerate(rig):
        lines.append(f"[camera.{i}]")
        lines.append(
            "intrinsics = " + " ".join(repr(float(x)) for x in (intr.f_x, intr.f_y, intr.c_x, intr.c_y))
            + f" {intr.width} {intr.height}"
        )
        lines.append("rotation = " + " ".join(repr(float(x)) for x in pose.rotation.reshape(-1)))
        lines.append("translation = " + " ".join(repr(float(x)) for x in pose.translation))
        lines.append("")
    return "\n".join(lines)


def surround_rig(
    width: int = 192,
    height: int = 108,
    fov_deg: float = 70.0,
    mount_height: float = 1.6,
    mount_radius: float = 1.0,
    yaws_deg: Sequence[float] = (0.0, -55.0, 55.0, -110.0, 110.0, 180.0),
) -> CameraRig:
    """Six-camera surround rig laid out like a typical autonomous-driving car."""
    f = (width / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
    intr = Intrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)
    cams = []
    for yaw_deg in yaws_deg:
        yaw = math.radians(yaw_deg)
        pos = (mount_radius * math.cos(yaw), mount_radius * math.sin(yaw), mount_height)
        cams.append(Camera(intr, CameraPose.looking_along(yaw, pos)))
    return CameraRig(tuple(cams))
