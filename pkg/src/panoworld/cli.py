"""Command line entry point.

Exit codes: 0 ok, 2 configuration error, 3 oracle error, 4 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import distortion, fileio
from .config import ConfigError, PipelineConfig
from .oracle import OracleError
from .pipeline import STAGES, Pipeline, StageError, evaluate, make_pairs

EXIT_OK, EXIT_CONFIG, EXIT_ORACLE, EXIT_STAGE = 0, 2, 3, 4

log = logging.getLogger("panoworld")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    over = {}
    for item in args.set or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        over[key.strip()] = _parse_value(val)
    for flag, key in (("input", "input"), ("out", "output_dir"), ("seed", "seed"), ("heuristic", "heuristic"),
                      ("fov", "fov_x_deg")):
        v = getattr(args, flag, None)
        if v is not None:
            over[key] = v
    return cfg.override(**over) if over else cfg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (JSON value)")
    p.add_argument("--input", help="input image")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--heuristic", choices=["AdHoc", "Sequential", "Anchored"])
    p.add_argument("--fov", type=float, help="horizontal field of view of the input, degrees")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="panoworld", description="Panorama-based 3D scene synthesis toolkit")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="run every stage (resumable)")
    _add_common(p)
    p.add_argument("--stop-after", choices=STAGES)
    for name, hlp in (("pano", "progressive panorama outpainting"), ("lift", "lift the panorama to a point cloud"),
                      ("grid", "render and inpaint the camera grid"), ("export", "write trainer-ready assets")):
        _add_common(sub.add_parser(name, help=hlp))

    p = sub.add_parser("pairs", help="forward-backward warp pairs from a finished lift stage")
    _add_common(p)
    p.add_argument("--pairs-out", required=True)
    p.add_argument("--per-view", type=int, default=2)
    p.add_argument("--max-translation", type=float, default=0.3)

    p = sub.add_parser("eval", help="coverage / PSNR report of a pipeline output")
    _add_common(p)

    p = sub.add_parser("init-config", help="write the default config")
    p.add_argument("path")

    p = sub.add_parser("distort-fit", help="fit a distortion field mapping an image onto a target")
    p.add_argument("--image", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--grid-res", type=int, default=distortion.GRID_RES)
    p.add_argument("--offset-scale", type=float, default=distortion.OFFSET_SCALE)
    p.add_argument("--seed", type=int, default=0)
    return ap


def _distort_fit(args) -> int:
    img = fileio.read_png(args.image).astype(np.float32)
    tgt = fileio.read_png(args.target).astype(np.float32)
    if img.shape != tgt.shape:
        raise ConfigError("image and target sizes differ")
    fld = distortion.DistortionField.create(args.seed, args.grid_res, args.offset_scale, dtype=np.float32)
    res = distortion.fit(fld, [(img, tgt, "image")], steps=args.steps, lr=args.lr)
    distortion.save_checkpoint(fld, args.checkpoint)
    print(json.dumps({"initial_loss": res.losses[0], "final_loss": res.final_losses["image"],
                      "steps": len(res.losses)}))
    return EXIT_OK


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "init-config":
            PipelineConfig().save(args.path)
            return EXIT_OK
        if args.verb == "distort-fit":
            return _distort_fit(args)
        cfg = load_config(args)
        if args.verb == "eval":
            print(json.dumps(evaluate(cfg.output_dir), indent=1, sort_keys=True))
            return EXIT_OK
        if args.verb == "pairs":
            n = make_pairs(cfg.output_dir, args.pairs_out, args.per_view, args.max_translation, seed=cfg.seed)
            print(f"wrote {n} warp pairs to {args.pairs_out}")
            return EXIT_OK
        pipe = Pipeline(cfg)
        if args.verb == "run":
            res = pipe.run(args.stop_after)
            print(f"stages done: {', '.join(res.stages_run)} -> {Path(cfg.output_dir)}")
        else:
            Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
            cfg.save(Path(cfg.output_dir) / "config.json")
            getattr(pipe, args.verb)()
            print(f"{args.verb} done -> {Path(cfg.output_dir) / args.verb}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ORACLE if exc.is_oracle_error else EXIT_STAGE
    except OracleError as exc:
        print(f"oracle error: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except (FileNotFoundError, distortion.DivergenceError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
