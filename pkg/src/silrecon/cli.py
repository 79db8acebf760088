"""Command-line entry point (``silrecon``)."""

from __future__ import annotations

import argparse
import sys

from .pipeline import STAGES, PipelineConfig, PipelineError, load_config, run_pipeline, run_stage

EXIT_OK, EXIT_USAGE = 0, 1


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; this tool reserves 2 for bad inputs."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("--library", help="directory of segmented OBJ models, or one OBJ file")
    common.add_argument("--target", help="target silhouette (PNG mask or JSON polylines)")
    common.add_argument("--poses", type=int, help="pose-grid size (default 360)")
    common.add_argument("--resolution", type=int, help="render resolution in pixels (default 256)")
    common.add_argument("--seed", type=int, help="reserved; the pipeline is deterministic")
    common.add_argument("--no-timings", action="store_true", help="omit stage timings from the report")
    parser = _Parser(prog="silrecon", description="Silhouette-guided controller reconstruction "
                     "and deformation of segmented 3D models.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in STAGES + ("full-pipeline",):
        sub.add_parser(name, parents=[common])
    return parser


def _config(args) -> PipelineConfig:
    overrides = {"out": args.out, "library": args.library, "target": args.target,
                 "poses": args.poses, "resolution": args.resolution, "seed": args.seed,
                 "timings": False if args.no_timings else None}
    if args.config:
        return load_config(args.config, **overrides)
    return PipelineConfig(**{k: v for k, v in overrides.items() if v is not None})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        if args.command == "full-pipeline":
            report = run_pipeline(cfg)
        else:
            report = run_stage(args.command, cfg)
    except PipelineError as e:
        print(f"silrecon {args.command}: error: {e}", file=sys.stderr)
        return e.exit_code
    if report is not None:
        print(f"candidate {report.candidate_name}: IoU {report.iou_before:.4f} -> {report.iou_after:.4f}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
