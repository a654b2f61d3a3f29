"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration problems, 2 bad input data,
3 runtime failures.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import (
    describe_sources,
    load_config,
    parse_config_text,
    parse_overrides,
    render_config,
    seed_overrides,
)
from .errors import ConfigError, DataError, FlawmapError

log = logging.getLogger("flawmap")


class _UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage problems are code 1
        raise _UsageError(f"{self.prog}: {message}")


def build_parser() -> _Parser:
    parser = _Parser(prog="flawmap", description="Surface-defect localization pipeline")
    parser.add_argument("--config", metavar="FILE", help="INI config file")
    parser.add_argument("--work-dir", metavar="DIR", help="override paths.work_dir")
    parser.add_argument("--seed", type=int, metavar="N", help="pin every stage seed to N")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        dest="overrides",
        help="override one config value (repeatable)",
    )
    parser.add_argument("--force", action="store_true", help="rerun stages even if up to date")
    parser.add_argument("-v", "--verbose", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", help="discover images and write the split manifest")
    sub.add_parser("tile", help="cut train boards into window tiles")
    sub.add_parser("cluster", help="cluster tile features and select a balanced subset")
    p = sub.add_parser("synth-preview", help="write sample synthetic defects")
    p.add_argument("--count", type=int, default=8)
    p = sub.add_parser("train", help="train the autoencoder")
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    p = sub.add_parser("eval", help="score held-out boards and write ROC + heatmaps")
    p.add_argument("--checkpoint", metavar="FILE")
    p.add_argument("--stub", choices=["identity"], help="replace the model (harness checks)")
    p = sub.add_parser("ssim", help="structural similarity between two images")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p = sub.add_parser("heatmap", help="residual heatmap for one image")
    p.add_argument("image")
    p.add_argument("--out", required=True, metavar="FILE")
    p.add_argument("--checkpoint", metavar="FILE")
    sub.add_parser("show-config", help="print the effective configuration")
    return parser


def _assemble_config(args):
    overrides = parse_overrides(args.overrides)
    if args.seed is not None:
        for sec, pairs in seed_overrides(args.seed).items():
            overrides.setdefault(sec, {}).update(pairs)
    if args.work_dir is not None:
        overrides.setdefault("paths", {})["work_dir"] = args.work_dir
    cfg = load_config(args.config, overrides)
    return cfg, overrides


def _dispatch(args) -> int:
    cfg, overrides = _assemble_config(args)

    if args.command == "show-config":
        sys.stdout.write(render_config(cfg))
        file_values = None
        if args.config:
            from pathlib import Path

            file_values = parse_config_text(Path(args.config).read_text(), args.config)
        notes = describe_sources(file_values, overrides)
        if notes:
            sys.stdout.write("\n# non-default values\n")
            for n in notes:
                sys.stdout.write(f"# {n}\n")
        return 0

    if args.command == "ssim":
        from .pipeline import run_ssim

        score = run_ssim(args.image_a, args.image_b, cfg)
        print(f"{score:.6f}")
        return 0

    from .pipeline import (
        WorkDir,
        run_cluster,
        run_eval,
        run_heatmap,
        run_ingest,
        run_synth_preview,
        run_tile,
        run_train,
    )

    if args.command == "heatmap":
        run_heatmap(cfg, args.image, args.out, args.checkpoint)
        return 0

    wd = WorkDir(cfg.paths.work_dir)
    wd.acquire_lock()
    try:
        if args.command == "ingest":
            run_ingest(cfg, force=args.force)
        elif args.command == "tile":
            run_tile(cfg, force=args.force)
        elif args.command == "cluster":
            run_cluster(cfg, force=args.force)
        elif args.command == "synth-preview":
            run_synth_preview(cfg, count=args.count)
        elif args.command == "train":
            run_train(cfg, force=args.force, resume=args.resume)
        elif args.command == "eval":
            run_eval(cfg, force=args.force, checkpoint=args.checkpoint, stub=args.stub)
        else:
            raise _UsageError(f"unknown command {args.command!r}")
    finally:
        wd.release_lock()
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        # -v only makes our own loggers chatty; third-party DEBUG (PIL dumps
        # per-chunk PNG internals) stays off
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
        if args.verbose:
            logging.getLogger("flawmap").setLevel(logging.DEBUG)
        return _dispatch(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FlawmapError as exc:
        kind = "data" if isinstance(exc, DataError) else (
            "config" if isinstance(exc, ConfigError) else "runtime"
        )
        print(f"error ({kind}): {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
