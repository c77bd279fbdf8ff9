"""Command-line entry point.

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 numerical divergence.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import format_config, parse_config
from .exceptions import (ConfigurationError, DivergenceError, FeatureIOError, FormatError, PanoscanError,
                         UsageError)
from .pipeline import inspect_text, run_fuse, run_generate, run_metrics

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_DIVERGENCE = 0, 2, 3, 4

log = logging.getLogger("panoscan")

# flag dest -> config key
FLAG_KEYS = {
    "seed": "io.seed",
    "out_dir": "io.out_dir",
    "tiles_dir": "io.tiles_dir",
    "features_dir": "metrics.features_dir",
    "mode": "scan.mode",
    "aspect": "canvas.aspect",
}


def _enhancer_overrides(text):
    if text is None:
        return {}
    text = text.strip().lower()
    if text == "identity":
        return {"enhancer.kind": "identity", "enhancer.scale": "1"}
    for prefix in ("upscale:", "upscale", "x"):
        if text.startswith(prefix) and text[len(prefix):]:
            return {"enhancer.kind": "upscale", "enhancer.scale": text[len(prefix):]}
    raise ConfigurationError(f"--enhancer expects 'identity' or 'upscale:K', got {text!r}",
                             keys=("enhancer.kind",))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="configuration file (key = value lines)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("--tiles-dir", dest="tiles_dir")
    common.add_argument("--features-dir", dest="features_dir")
    common.add_argument("--mode", choices=("linear", "snake"))
    common.add_argument("--aspect", help="canvas aspect ratio, e.g. 8:1 or 1:8")
    common.add_argument("--enhancer", help="identity or upscale:K")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="panoscan", description="Scan-based wide panorama toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="plan, generate, fuse and write a panorama")
    sub.add_parser("fuse", parents=[common], help="fuse tiles from --tiles-dir")
    metrics = sub.add_parser("metrics", parents=[common], help="Style-L and GSD for a panorama")
    metrics.add_argument("panorama", type=Path, help="panorama .sstf or .ppm/.pgm")
    sub.add_parser("inspect", parents=[common], help="print trajectory, windows, blocks and coverage")
    sub.add_parser("show-config", parents=[common], help="print the fully resolved configuration")
    return parser


def config_from_args(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = str(value)
    overrides.update(_enhancer_overrides(args.enhancer))
    return parse_config(args.config, overrides)


def _run(args) -> int:
    config = config_from_args(args)
    out_dir = Path(config["io.out_dir"])
    if args.command == "generate":
        result = run_generate(config, out_dir)
        print(f"wrote {result.files['panorama']} ({config.extent[0]}x{config.extent[1]}, "
              f"{len(result.trajectory)} windows, {len(result.partition.blocks)} blocks)")
    elif args.command == "fuse":
        if not config["io.tiles_dir"]:
            raise ConfigurationError("fuse needs --tiles-dir", keys=("io.tiles_dir",))
        run_fuse(config, config["io.tiles_dir"], out_dir)
        print(f"wrote {out_dir / 'panorama.sstf'}")
    elif args.command == "metrics":
        report = run_metrics(args.panorama, config, out_dir)
        sys.stdout.write(report.to_csv())
    elif args.command == "inspect":
        sys.stdout.write(inspect_text(config))
    elif args.command == "show-config":
        sys.stdout.write(format_config(config))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except DivergenceError as exc:
        log.error("%s", exc)
        return EXIT_DIVERGENCE
    except (FormatError, FeatureIOError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    except (ConfigurationError, UsageError, PanoscanError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
