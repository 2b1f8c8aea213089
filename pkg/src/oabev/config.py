"""Pipeline configuration and its INI file form.

Sections and keys (all optional; omitted keys take the dataclass defaults)::

    [pipeline]  rig, mode, fusion, out, seed, p_hit, encoder_params, fusion_params, param_seed, relu, threads
    [binning]   d_min, d_max, K
    [grid]      x_range, y_range, z_range, cell_size_xy, cell_size_z
    [scene]     box_count, length_range, width_range, height_range, range_scale,
                min_distance, min_gap, max_retries, boxes
    [fusion]    channels, heads, points, n_ref, layers, feature_stride, fb_blur, fb_bump, fb_smooth
    [losses]    alpha, beta, gamma, l3d, l2d

Ranges are two whitespace-separated numbers. ``rig = builtin`` selects the
default surround rig; any other value is a rig file path.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .camera import CameraRig, load_rig, surround_rig
from .depth_bins import LidBinning
from .errors import ConfigurationError
from .losses import LossWeights
from .pseudo3d import VoxelGridSpec
from .scenegen import SceneSpec

MODES = ("oracle-depth", "decoded-depth")
BUILTIN_RIG = "builtin"


def default_rig() -> CameraRig:
    """Six cameras 60 degrees apart with 120 degree fields of view, so every bearing is seen twice."""
    return surround_rig(width=192, height=96, fov_deg=120.0, yaws_deg=(0.0, 60.0, 120.0, 180.0, -120.0, -60.0))


@dataclass(frozen=True)
class FusionConfig:
    channels: int = 16
    heads: int = 2
    points: int = 4
    n_ref: int = 4
    layers: int = 3
    feature_stride: int = 4
    fb_blur: float = 1.0
    fb_bump: float = 1.0
    fb_smooth: float = 1.5


@dataclass(frozen=True)
class SurrogateLosses:
    l3d: float = 1.0
    l2d: float = 1.0


@dataclass(frozen=True)
class PipelineConfig:
    rig: str = BUILTIN_RIG
    mode: str = "oracle-depth"
    fusion: bool = True
    out: str = "oabev-out"
    seed: int = 7
    p_hit: float = 0.9
    encoder_params: str = ""
    fusion_params: str = ""
    param_seed: int = 0
    relu: bool = False
    threads: int = 1
    binning: LidBinning = field(default_factory=LidBinning)
    grid: VoxelGridSpec = field(default_factory=lambda: VoxelGridSpec(cell_size_xy=0.4, cell_size_z=0.4))
    scene: SceneSpec = field(default_factory=SceneSpec)
    scene_boxes: str = ""
    fusion_cfg: FusionConfig = field(default_factory=FusionConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    surrogates: SurrogateLosses = field(default_factory=SurrogateLosses)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.5 < self.p_hit < 1.0:
            raise ConfigurationError("p_hit must lie in (0.5, 1)")
        if self.threads < 1:
            raise ConfigurationError("threads must be >= 1")
        for name in ("encoder_params", "fusion_params", "scene_boxes"):
            path = getattr(self, name)
            if path and not Path(path).is_file():
                raise ConfigurationError(f"{name} file not found: {path}")
        if self.rig != BUILTIN_RIG and not Path(self.rig).is_file():
            raise ConfigurationError(f"rig file not found: {self.rig}")

    @property
    def geometry_only(self) -> bool:
        return not self.fusion

    @property
    def pipeline_grid(self) -> VoxelGridSpec:
        return self.grid.scaled(self.scene.range_scale)

    def load_rig(self) -> CameraRig:
        return default_rig() if self.rig == BUILTIN_RIG else load_rig(self.rig)


# --- INI conversion -------------------------------------------------------

_SECTIONS = {
    "pipeline": None,
    "binning": "binning",
    "grid": "grid",
    "scene": "scene",
    "fusion": "fusion_cfg",
    "losses": None,
}


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return " ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw: str, like: Any, key: str) -> Any:
    try:
        if isinstance(like, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            parts = raw.split()
            if len(parts) != len(like):
                raise ValueError(f"expected {len(like)} numbers")
            return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {raw!r} ({exc})") from exc
    return raw.strip()


def _parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive (K)
    return parser


def _update(obj: Any, section: configparser.SectionProxy, name: str, rename: dict[str, str] | None = None):
    rename = rename or {}
    known = {f.name for f in fields(obj) if f.init}
    changes = {}
    for key, raw in section.items():
        attr = rename.get(key, key)
        if attr not in known:
            raise ConfigurationError(f"unknown key [{name}] {key}")
        changes[attr] = _coerce(raw, getattr(obj, attr), f"[{name}] {key}")
    return replace(obj, **changes) if changes else obj


_PIPELINE_KEYS = ("rig", "mode", "fusion", "out", "seed", "p_hit", "encoder_params", "fusion_params",
                  "param_seed", "relu", "threads")


def parse_config(text: str, base_dir: Path | None = None) -> PipelineConfig:
    parser = _parser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from exc
    unknown = set(parser.sections()) - set(_SECTIONS)
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
    values: dict[str, Any] = {}
    defaults = PipelineConfig()
    if parser.has_section("pipeline"):
        for key, raw in parser["pipeline"].items():
            if key not in _PIPELINE_KEYS:
                raise ConfigurationError(f"unknown key [pipeline] {key}")
            values[key] = _coerce(raw, getattr(defaults, key), f"[pipeline] {key}")
    if parser.has_section("binning"):
        values["binning"] = _update(defaults.binning, parser["binning"], "binning")
    if parser.has_section("grid"):
        values["grid"] = _update(defaults.grid, parser["grid"], "grid")
    if parser.has_section("scene"):
        sec = dict(parser["scene"])
        boxes = sec.pop("boxes", "")
        if boxes:
            values["scene_boxes"] = boxes
        sub = _parser()
        sub.read_dict({"scene": sec})
        values["scene"] = _update(defaults.scene, sub["scene"], "scene")
    if parser.has_section("fusion"):
        values["fusion_cfg"] = _update(defaults.fusion_cfg, parser["fusion"], "fusion")
    if parser.has_section("losses"):
        sec = dict(parser["losses"])
        w = {k: sec.pop(k) for k in ("alpha", "beta", "gamma") if k in sec}
        sub = _parser()
        sub.read_dict({"w": w, "s": sec})
        values["weights"] = _update(defaults.weights, sub["w"], "losses")
        values["surrogates"] = _update(defaults.surrogates, sub["s"], "losses")
    if base_dir is not None:
        for key in ("rig", "encoder_params", "fusion_params", "scene_boxes"):
            v = values.get(key)
            if v and v != BUILTIN_RIG and not Path(v).is_absolute():
                values[key] = str(base_dir / v)
    return PipelineConfig(**values)


def load_config(path: str | Path) -> PipelineConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file not found: {p}")
    return parse_config(p.read_text(), base_dir=p.parent)


def format_config(cfg: PipelineConfig) -> str:
    parser = _parser()
    parser["pipeline"] = {k: _fmt(getattr(cfg, k)) for k in _PIPELINE_KEYS}
    parser["binning"] = {f.name: _fmt(getattr(cfg.binning, f.name)) for f in fields(cfg.binning) if f.init}
    parser["grid"] = {k: _fmt(v) for k, v in asdict(cfg.grid).items()}
    scene = {k: _fmt(v) for k, v in asdict(cfg.scene).items()}
    scene["boxes"] = cfg.scene_boxes
    parser["scene"] = scene
    parser["fusion"] = {k: _fmt(v) for k, v in asdict(cfg.fusion_cfg).items()}
    losses = {k: _fmt(v) for k, v in asdict(cfg.weights).items()}
    losses.update({k: _fmt(v) for k, v in asdict(cfg.surrogates).items()})
    parser["losses"] = losses
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
