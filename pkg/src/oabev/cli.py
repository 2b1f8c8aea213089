"""Command-line driver.

Verbs: ``run``, ``verify``, ``gen-scene``, ``dump-config``. Any error ends
the process with the error's exit status and a single stderr line::

    oabev: error code=<CODE> exit=<STATUS> message="<text>"
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from threadpoolctl import threadpool_limits

from .camera import format_rig
from .config import MODES, PipelineConfig, format_config, load_config
from .errors import ArtifactIOError, ConfigurationError, OABevError, UsageError, VerificationError
from .foreground import format_boxes
from .io import save_tensors

THREADS_ENV = "OABEV_THREADS"
U64_MAX = 2**64 - 1

SCENE_BOXES_FILE = "scene.boxes"
RIG_FILE = "rig.ini"
BOXES_2D_FILE = "boxes2d.txt"
DEPTH_FILE = "depth.oabt"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # type: ignore[override]
        raise UsageError(message)


def _u64(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from exc
    if not 0 <= value <= U64_MAX:
        raise argparse.ArgumentTypeError(f"seed must fit in an unsigned 64-bit integer: {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="oabev", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    helps = {
        "run": "run the pipeline and write metrics, occupancy image and tensor dumps",
        "verify": "run the invariant suite and report each property",
        "gen-scene": "write a synthetic scene (3D boxes, rig, 2D boxes, depth maps)",
        "dump-config": "print the effective configuration",
    }
    for verb, text in helps.items():
        p = sub.add_parser(verb, help=text)
        p.add_argument("--config", type=Path, help="INI configuration file")
        p.add_argument("--seed", type=_u64, help="scene and field seed (u64)")
        p.add_argument("--mode", choices=MODES, help="depth source for the pseudo-points")
        p.add_argument("--out", type=Path, help="output directory")
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config) if args.config is not None else PipelineConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.mode is not None:
        changes["mode"] = args.mode
    if args.out is not None:
        changes["out"] = str(args.out)
    return replace(cfg, **changes) if changes else cfg


def thread_cap(cfg: PipelineConfig) -> int:
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return cfg.threads
    try:
        env = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from exc
    if env < 1:
        raise ConfigurationError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return min(env, cfg.threads)


def cmd_run(cfg: PipelineConfig, out) -> int:
    from .pipeline import run

    result = run(cfg)
    for metric, oid, value in result.metrics:
        if oid is None:
            print(f"{metric}={value}", file=out)
    print(f"artifacts={Path(cfg.out).resolve()}", file=out)
    return 0


def cmd_verify(cfg: PipelineConfig, out) -> int:
    from .verify import run_checks

    results = run_checks(cfg)
    for r in results:
        print(r.line(), file=out)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} properties passed", file=out)
    if failed:
        raise VerificationError(f"{len(failed)} properties failed: {', '.join(failed)}")
    return 0


def cmd_gen_scene(cfg: PipelineConfig, out) -> int:
    from .pipeline import load_scene
    from .scenegen import format_boxes_3d

    scene = load_scene(cfg, cfg.load_rig(), cfg.pipeline_grid)
    target = Path(cfg.out)
    target.mkdir(parents=True, exist_ok=True)
    (target / SCENE_BOXES_FILE).write_text(format_boxes_3d(scene.boxes))
    (target / RIG_FILE).write_text(format_rig(scene.rig))
    (target / BOXES_2D_FILE).write_text(format_boxes(dict(enumerate(scene.boxes_2d))))
    save_tensors(target / DEPTH_FILE, {f"camera.{i}.depth": d for i, d in enumerate(scene.depth_maps)})
    print(json.dumps({"objects": len(scene.boxes), "cameras": len(scene.rig), "out": str(target.resolve())}), file=out)
    return 0


def cmd_dump_config(cfg: PipelineConfig, out) -> int:
    out.write(format_config(cfg))
    return 0


COMMANDS = {"run": cmd_run, "verify": cmd_verify, "gen-scene": cmd_gen_scene, "dump-config": cmd_dump_config}


def error_line(exc: OABevError) -> str:
    message = " ".join(str(exc).split()).replace('"', "'")
    return f'oabev: error code={exc.code} exit={exc.exit_status} message="{message}"'


def main(argv: Sequence[str] | None = None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        try:
            args = build_parser().parse_args(argv)
            cfg = resolve_config(args)
            with threadpool_limits(limits=thread_cap(cfg)):
                return COMMANDS[args.verb](cfg, stdout)
        except OABevError:
            raise
        except OSError as exc:
            raise ArtifactIOError(f"{exc.strerror or exc}: {exc.filename or ''}".strip(": ")) from exc
    except OABevError as exc:
        print(error_line(exc), file=stderr)
        return exc.exit_status
    except Exception as exc:  # noqa: BLE001 - still one parseable line
        internal = OABevError(f"{type(exc).__name__}: {exc}")
        print(error_line(internal), file=stderr)
        return internal.exit_status


if __name__ == "__main__":
    sys.exit(main())
