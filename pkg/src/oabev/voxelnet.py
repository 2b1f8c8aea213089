"""Sparse 3D convolution encoder and z-flattening into a BEV map.

Kernels are 3x3x3 with padding 1. Output site ``o`` of a layer with stride
``s`` reads input sites ``s * o + k`` for ``k`` in ``{-1, 0, 1}^3``; weights
are indexed ``[kx + 1, ky + 1, kz + 1, c_in, c_out]``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigurationError, ShapeError
from .pseudo3d import SparseVoxelGrid, flat_keys

Mode = Literal["subm", "strided"]

KERNEL_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
DEFAULT_CHANNELS = (4, 8, 16, 16, 16)
DEFAULT_STRIDES = (1, 2, 2, 2)


@dataclass(frozen=True)
class SparseConvLayer:
    weight: NDArray[np.float64]
    bias: NDArray[np.float64]
    stride: int = 1
    mode: Mode = "subm"

    def __post_init__(self) -> None:
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if w.ndim != 5 or w.shape[:3] != (3, 3, 3):
            raise ShapeError(f"kernel must be (3, 3, 3, C_in, C_out), got {w.shape}")
        if b.shape != (w.shape[4],):
            raise ShapeError(f"bias must have length {w.shape[4]}, got {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ConfigurationError("non-finite convolution weights")
        if self.mode not in ("subm", "strided"):
            raise ConfigurationError(f"unknown convolution mode {self.mode!r}")
        if self.stride not in (1, 2):
            raise ConfigurationError(f"stride must be 1 or 2, got {self.stride}")
        if self.stride == 2 and self.mode != "strided":
            raise ConfigurationError("stride 2 requires strided mode")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def c_in(self) -> int:
        return self.weight.shape[3]

    @property
    def c_out(self) -> int:
        return self.weight.shape[4]

    def output_shape(self, shape: Sequence[int]) -> tuple[int, int, int]:
        return tuple(math.ceil(n / self.stride) for n in shape)

    @classmethod
    def identity(cls, channels: int, stride: int = 1, mode: Mode = "subm") -> "SparseConvLayer":
        w = np.zeros((3, 3, 3, channels, channels))
        w[1, 1, 1] = np.eye(channels)
        return cls(w, np.zeros(channels), stride, mode)

    @classmethod
    def random(
        cls, c_in: int, c_out: int, rng: np.random.Generator, stride: int = 1, mode: Mode = "subm", bias: bool = True
    ) -> "SparseConvLayer":
        w = rng.normal(0.0, 1.0 / math.sqrt(27 * c_in), size=(3, 3, 3, c_in, c_out))
        b = rng.normal(0.0, 0.01, size=c_out) if bias else np.zeros(c_out)
        return cls(w, b, stride, mode)


@dataclass(frozen=True)
class Rulebook:
    """Output coordinates plus, per kernel offset, the (input row, output row) pairs it connects."""

    out_shape: tuple[int, int, int]
    out_coords: NDArray[np.int64]
    pairs: tuple[tuple[NDArray[np.int64], NDArray[np.int64]], ...]


def _lookup(keys: NDArray[np.int64], query: NDArray[np.int64]) -> NDArray[np.int64]:
    """Row of each query key in sorted ``keys``, or -1."""
    if len(keys) == 0:
        return np.full(len(query), -1, dtype=np.int64)
    pos = np.searchsorted(keys, query)
    pos_c = np.minimum(pos, len(keys) - 1)
    return np.where(keys[pos_c] == query, pos_c, -1)


def build_rulebook(grid: SparseVoxelGrid, stride: int, mode: Mode) -> Rulebook:
    shape = grid.shape
    out_shape = tuple(math.ceil(n / stride) for n in shape)
    coords = grid.coords
    if mode == "subm":
        out_coords = coords
    else:
        cand = (coords[:, None, :] - KERNEL_OFFSETS[None, :, :]).reshape(-1, 3)
        ok = np.all(cand % stride == 0, axis=1)
        cand = cand[ok] // stride
        ok = np.all((cand >= 0) & (cand < np.array(out_shape)), axis=1)
        cand = cand[ok]
        if len(cand):
            out_keys = np.unique(flat_keys(cand, out_shape))
            nyz = out_shape[1] * out_shape[2]
            out_coords = np.stack(
                [out_keys // nyz, (out_keys // out_shape[2]) % out_shape[1], out_keys % out_shape[2]], axis=1
            )
        else:
            out_coords = np.zeros((0, 3), dtype=np.int64)
    in_keys = flat_keys(coords, shape)
    bounds = np.array(shape)
    pairs = []
    for k in KERNEL_OFFSETS:
        nb = out_coords * stride + k
        inside = np.all((nb >= 0) & (nb < bounds), axis=1)
        rows = np.full(len(out_coords), -1, dtype=np.int64)
        if np.any(inside):
            rows[inside] = _lookup(in_keys, flat_keys(nb[inside], shape))
        out_rows = np.nonzero(rows >= 0)[0]
        pairs.append((rows[out_rows], out_rows))
    return Rulebook(out_shape, out_coords, tuple(pairs))


def sparse_conv_forward(grid: SparseVoxelGrid, layer: SparseConvLayer, rulebook: Rulebook | None = None) -> SparseVoxelGrid:
    """Convolve only at active sites; inactive inputs count as zero."""
    if grid.channels != layer.c_in:
        raise ShapeError(f"grid has {grid.channels} channels, layer expects {layer.c_in}")
    rb = rulebook or build_rulebook(grid, layer.stride, layer.mode)
    out = np.tile(layer.bias, (len(rb.out_coords), 1))
    for (in_rows, out_rows), k in zip(rb.pairs, KERNEL_OFFSETS):
        if len(in_rows):
            # Each output row appears at most once per offset, so plain fancy-index += is safe.
            out[out_rows] += grid.features[in_rows] @ layer.weight[k[0] + 1, k[1] + 1, k[2] + 1]
    spec = grid.spec.downsampled(layer.stride) if (grid.spec is not None and layer.stride > 1) else grid.spec
    return SparseVoxelGrid(rb.out_shape, rb.out_coords, out, spec)


@dataclass(frozen=True)
class VoxelEncoder:
    layers: tuple[SparseConvLayer, ...]
    relu: bool = False
    seed: int | None = None

    def __post_init__(self) -> None:
        layers = tuple(self.layers)
        if not layers:
            raise ConfigurationError("encoder needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.c_out != b.c_in:
                raise ShapeError(f"channel widths do not chain: {a.c_out} -> {b.c_in}")
        object.__setattr__(self, "layers", layers)

    @property
    def c_in(self) -> int:
        return self.layers[0].c_in

    @property
    def c_out(self) -> int:
        return self.layers[-1].c_out

    @property
    def total_stride(self) -> int:
        return math.prod(l.stride for l in self.layers)

    @classmethod
    def default(
        cls,
        seed: int = 0,
        channels: Sequence[int] = DEFAULT_CHANNELS,
        strides: Sequence[int] = DEFAULT_STRIDES,
        relu: bool = False,
    ) -> "VoxelEncoder":
        if len(channels) != len(strides) + 1:
            raise ConfigurationError("need one more channel width than layers")
        rng = np.random.default_rng(seed)
        layers = []
        for i, s in enumerate(strides):
            mode: Mode = "subm" if (i == 0 and s == 1) else "strided"
            layers.append(SparseConvLayer.random(channels[i], channels[i + 1], rng, s, mode))
        return cls(tuple(layers), relu=relu, seed=seed)

    @classmethod
    def identity(cls, channels: int, strides: Sequence[int] = DEFAULT_STRIDES) -> "VoxelEncoder":
        layers = [
            SparseConvLayer.identity(channels, s, "subm" if (i == 0 and s == 1) else "strided")
            for i, s in enumerate(strides)
        ]
        return cls(tuple(layers))

    def to_tensors(self) -> dict[str, NDArray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"encoder.{i}.kernel"] = layer.weight
            out[f"encoder.{i}.bias"] = layer.bias
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, NDArray], strides: Sequence[int] = DEFAULT_STRIDES, relu: bool = False):
        layers = []
        for i, s in enumerate(strides):
            try:
                w, b = tensors[f"encoder.{i}.kernel"], tensors[f"encoder.{i}.bias"]
            except KeyError as exc:
                raise ConfigurationError(f"encoder weights missing {exc.args[0]}") from exc
            layers.append(SparseConvLayer(w, b, s, "subm" if (i == 0 and s == 1) else "strided"))
        return cls(tuple(layers), relu=relu)


def encode_voxels(grid: SparseVoxelGrid, encoder: VoxelEncoder) -> SparseVoxelGrid:
    out = grid
    for layer in encoder.layers:
        out = sparse_conv_forward(out, layer)
        if encoder.relu:
            out.features = np.maximum(out.features, 0.0)
    return out


@dataclass
class BevFeatureMap:
    """Dense BEV features indexed ``[ix, iy, channel]`` with a per-cell validity flag."""

    features: NDArray[np.float64]
    valid: NDArray[np.bool_] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 3:
            raise ShapeError(f"BEV features must be (H, W, C), got {self.features.shape}")
        if self.valid is None:
            self.valid = np.ones(self.features.shape[:2], dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.features.shape[:2]:
            raise ShapeError("validity grid does not match feature grid")

    @property
    def shape(self) -> tuple[int, int]:
        return self.features.shape[:2]

    @property
    def channels(self) -> int:
        return self.features.shape[2]

    def copy(self) -> "BevFeatureMap":
        return BevFeatureMap(self.features.copy(), self.valid.copy())


def flatten_z(grid: SparseVoxelGrid) -> BevFeatureMap:
    """Concatenate each column's voxels in z-ascending slots (slot ``iz`` holds channels ``iz*C:(iz+1)*C``)."""
    nx, ny, nz = grid.shape
    C = grid.channels
    feats = np.zeros((nx, ny, nz, C))
    valid = np.zeros((nx, ny), dtype=bool)
    if len(grid):
        ix, iy, iz = grid.coords.T
        feats[ix, iy, iz] = grid.features
        valid[ix, iy] = True
    return BevFeatureMap(feats.reshape(nx, ny, nz * C), valid)
