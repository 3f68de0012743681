"""Command-line surface.

    generality validate --config exp.yaml
    generality run --config exp.yaml [--out DIR] [--seeds 1,2,3]
                   [--workers N] [--precision f32|f64]
    generality export --results DIR --what curve|errors-vs-epoch|subsample
    generality filters --checkpoint net.ckpt --layer-index 0 --out grid.pgm

Exit codes: 0 success, 1 runtime failure, 2 configuration error. The
GENERALITY_OUT environment variable sets the default output root.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import yaml

from .config import config_digest, validate_config
from .export import ExportError, export_filters, export_plot_data
from .runner import run_experiment

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="generality",
        description="Dataset-generality experiments with CNN transfer under "
                    "layer freezing")
    sub = parser.add_subparsers(dest="command", required=True)

    p_val = sub.add_parser("validate", help="check a config file and print its digest")
    p_val.add_argument("--config", required=True, type=Path)

    p_run = sub.add_parser("run", help="execute the configured experiment")
    p_run.add_argument("--config", required=True, type=Path)
    p_run.add_argument("--out", type=Path, default=None,
                       help="output directory (default: config output_dir, "
                            "then $GENERALITY_OUT/<digest>, then ./runs/<digest>)")
    p_run.add_argument("--seeds", type=str, default=None,
                       help="comma-separated seed override, e.g. 1,2,3")
    p_run.add_argument("--workers", type=int, default=1)
    p_run.add_argument("--precision", choices=("f32", "f64"), default=None)

    p_exp = sub.add_parser("export", help="emit tidy plot CSVs from a results directory")
    p_exp.add_argument("--results", required=True, type=Path)
    p_exp.add_argument("--what", required=True,
                       choices=("curve", "errors-vs-epoch", "subsample"))
    p_exp.add_argument("--out", type=Path, default=None)

    p_fil = sub.add_parser("filters", help="export a conv layer's kernels as a PGM grid")
    p_fil.add_argument("--checkpoint", required=True, type=Path)
    p_fil.add_argument("--layer-index", required=True, type=int)
    p_fil.add_argument("--out", required=True, type=Path)
    return parser


def _load_and_validate(config_path: Path, overrides: dict) -> tuple[dict, list[str]]:
    try:
        raw = yaml.safe_load(config_path.read_text())
    except FileNotFoundError:
        return {}, [f"{config_path}: no such file"]
    except yaml.YAMLError as exc:
        return {}, [f"{config_path}: not valid YAML ({exc})"]
    if not isinstance(raw, dict):
        return {}, [f"{config_path}: top level must be a mapping"]
    raw = {**raw, **overrides}
    return validate_config(raw, base_dir=config_path.parent)


def _cmd_validate(args) -> int:
    cfg, errors = _load_and_validate(args.config, {})
    if errors:
        for line in errors:
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"ok: {args.config}")
    print(f"digest: {config_digest(cfg)}")
    return EXIT_OK


def _cmd_run(args) -> int:
    overrides = {}
    if args.seeds:
        try:
            overrides["seeds"] = [int(s) for s in args.seeds.split(",") if s]
        except ValueError:
            print(f"config error: --seeds must be comma-separated integers, "
                  f"got {args.seeds!r}", file=sys.stderr)
            return EXIT_CONFIG
    if args.precision:
        overrides["precision"] = args.precision

    cfg, errors = _load_and_validate(args.config, overrides)
    if errors:
        for line in errors:
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_CONFIG

    digest = config_digest(cfg)
    if args.out is not None:
        out_dir = args.out
    elif cfg.get("output_dir"):
        out_dir = args.config.parent / cfg["output_dir"]
    else:
        root = Path(os.environ.get("GENERALITY_OUT", "runs"))
        out_dir = root / digest[:12]

    try:
        manifest = run_experiment(cfg, out_dir, base_dir=args.config.parent,
                                  workers=args.workers)
    except Exception as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    jobs = manifest["jobs"]
    print(f"experiment: {manifest['experiment']}")
    print(f"config digest: {manifest['config_digest']}")
    print(f"jobs: {jobs['executed']} trained, {jobs['cached']} from cache")
    print(f"results: {out_dir}")
    return EXIT_OK


def _cmd_export(args) -> int:
    try:
        target = export_plot_data(args.results, args.what, args.out)
    except ExportError as exc:
        print(f"export failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {target}")
    return EXIT_OK


def _cmd_filters(args) -> int:
    try:
        export_filters(args.checkpoint, args.layer_index, args.out)
    except Exception as exc:
        print(f"filter export failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handler = {"validate": _cmd_validate, "run": _cmd_run,
               "export": _cmd_export, "filters": _cmd_filters}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
