"""Binary tensor container, PGM images and the metrics CSV stream."""

from __future__ import annotations

import csv
import io
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from numpy.typing import NDArray

from .errors import ContainerError

MAGIC = b"OABT"
CONTAINER_VERSION = 1
METRICS_SCHEMA = "oabev-metrics/1"
METRICS_HEADER = ("schema", "metric", "object_id", "value")


def encode_tensors(tensors: Mapping[str, NDArray]) -> bytes:
    """Serialize named arrays; entries keep insertion order and are stored as little-endian f32."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", CONTAINER_VERSION, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ContainerError(f"tensor name too long: {name[:40]}...")
        a = np.asarray(arr)
        if a.ndim > 0xFF:
            raise ContainerError(f"tensor {name} has too many dimensions")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return buf.getvalue()


def decode_tensors(data: bytes) -> dict[str, NDArray[np.float32]]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ContainerError("truncated tensor container")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ContainerError("not an OABT tensor container")
    version, count = struct.unpack("<II", take(8))
    if version != CONTAINER_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    out: dict[str, NDArray[np.float32]] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(n)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerError("tensor name is not UTF-8") from exc
        if name in out:
            raise ContainerError(f"duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        out[name] = payload.copy()
    if pos != len(view):
        raise ContainerError(f"{len(view) - pos} trailing bytes after last tensor")
    return out


def save_tensors(path: str | Path, tensors: Mapping[str, NDArray]) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def load_tensors(path: str | Path) -> dict[str, NDArray[np.float32]]:
    p = Path(path)
    if not p.is_file():
        raise ContainerError(f"tensor file not found: {p}")
    return decode_tensors(p.read_bytes())


def encode_pgm(image: NDArray) -> bytes:
    """Binary (P5) 8-bit grayscale PGM."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM images are 2D")
    img = np.clip(img, 0, 255).astype(np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def decode_pgm(data: bytes) -> NDArray[np.uint8]:
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    pixels = data[len(data) - w * h :]
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)


def write_metrics(path: str | Path, rows: Iterable[tuple[str, int | str, float | int]], append: bool = False) -> None:
    """Write ``(metric, object_id, value)`` rows as RFC-4180 CSV; ``object_id`` is blank for scene-level rows."""
    p = Path(path)
    new = not (append and p.exists())
    with p.open("a" if append else "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\r\n")
        if new:
            writer.writerow(METRICS_HEADER)
        for metric, oid, value in rows:
            writer.writerow((METRICS_SCHEMA, metric, "" if oid is None else oid, _fmt(value)))


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def read_metrics(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
