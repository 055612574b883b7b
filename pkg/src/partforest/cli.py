"""Command-line entry point: ``partforest <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from . import pipeline
from .config import ExperimentConfig, load_config
from .imaging import ShapeError
from .lift3d import InitError, NumericalError
from .model import ConfigError, FormatError, SingularSystemError
from .synth import OutOfFrameError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("partforest")


def _global_options(parser, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", metavar="PATH", default=default, help="key = value experiment config")
    parser.add_argument("--seed", type=int, metavar="N", default=default, help="override the config seed")
    parser.add_argument("--out", metavar="DIR", default=default, help="output directory (overrides out_dir)")


def _mode_options(parser, required: bool):
    group = parser.add_mutually_exclusive_group(required=required)
    group.add_argument("--baseline", dest="mode", action="store_const", const="baseline",
                       help="tree model with backtracking only")
    group.add_argument("--enhanced", dest="mode", action="store_const", const="enhanced",
                       help="blob gating plus global configuration search")
    if not required:
        parser.set_defaults(mode="enhanced")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partforest", description=__doc__.splitlines()[0])
    _global_options(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "render the training and test sets and background plates",
        "train": "fit the part model and the 3D lifter",
        "detect": "detect 2D poses on the test set",
        "lift": "lift detections to 3D",
        "eval": "score detections and 3D predictions against ground truth",
        "render": "draw detections over the test frames",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        _global_options(p, suppress=True)
        if name == "detect":
            _mode_options(p, required=True)
        elif name in ("lift", "eval", "render"):
            _mode_options(p, required=False)
    return parser


def _configure_logging() -> None:
    level = os.environ.get("PARTFOREST_LOG", "error").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"PARTFOREST_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s")


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def run(args) -> None:
    cfg = _resolve_config(args)
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    if args.command == "synth":
        counts = pipeline.run_synth(cfg, out)
        print(f"train {counts['train']} frames, test {counts['test']} frames, {counts['plates']} plates -> {out}")
    elif args.command == "train":
        model_path, lifter_path = pipeline.run_train(cfg, out)
        print(f"model {model_path}, lifter {lifter_path}")
    elif args.command == "detect":
        print(pipeline.run_detect(cfg, out, args.mode))
    elif args.command == "lift":
        print(pipeline.run_lift(cfg, out, args.mode))
    elif args.command == "eval":
        print(pipeline.run_eval(cfg, out, args.mode))
    elif args.command == "render":
        print(pipeline.run_render(cfg, out, args.mode))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _configure_logging()
        run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, SingularSystemError, InitError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (pipeline.DataError, FormatError, ShapeError, OutOfFrameError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
