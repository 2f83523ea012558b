"""Command-line entry point: ``gridscope simulate | run | report``.

``simulate`` builds the scenario bundle for a config, ``run`` executes
analytics stages on an existing bundle, and ``report`` verifies the
manifest and renders the markdown summary.  Exit codes: 0 on success,
1 for configuration problems (bad config file, unknown stage, missing
prerequisite artifacts), 2 when a stage starts and fails or an artifact
no longer matches its recorded hash.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from .artifacts import ArtifactError
from .pipeline import (
    ANALYTICS_STAGES,
    ConfigError,
    PipelineConfig,
    StageError,
    load_config,
    render_report,
    run_stages,
    simulate,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_STAGE = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridscope",
        description="Feeder analytics pipeline: simulate, run, report.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", required=True, type=Path,
                        help="path to a JSON run config")
    common.add_argument("--out", "-o", type=Path, default=None,
                        help="run directory (overrides config out_dir)")
    common.add_argument("--seed", type=int, default=None,
                        help="override the config seed")

    sub.add_parser("simulate", parents=[common],
                   help="build the scenario bundle and start a manifest")

    run = sub.add_parser("run", parents=[common],
                         help="execute analytics stages on an existing bundle")
    run.add_argument(
        "--stages",
        default=None,
        help="comma-separated subset of: " + ", ".join(ANALYTICS_STAGES),
    )

    report = sub.add_parser("report",
                            help="verify artifacts and render the report")
    report.add_argument("--out", "-o", required=True, type=Path,
                        help="run directory holding a manifest")
    return parser


def _resolve(args) -> tuple[PipelineConfig, Path]:
    config = load_config(args.config)
    if args.seed is not None:
        config = PipelineConfig.from_dict({**config.to_dict(), "seed": args.seed})
    out_dir = args.out if args.out is not None else config.out_dir
    if out_dir is None:
        raise ConfigError("no run directory: set out_dir in the config or pass --out")
    return config, Path(out_dir)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            config, out_dir = _resolve(args)
            manifest = simulate(config, out_dir)
            print(f"simulated scenario in {out_dir}")
            print(f"content digest: {manifest.content_digest}")
        elif args.command == "run":
            config, out_dir = _resolve(args)
            stages = None
            if args.stages:
                stages = [s.strip() for s in args.stages.split(",") if s.strip()]
            manifest = run_stages(config, out_dir, stages)
            done = ", ".join(s for s in manifest.stages if s != "simulate")
            print(f"completed stages: {done}")
            print(f"content digest: {manifest.content_digest}")
        else:
            path = render_report(args.out)
            print(f"report written to {path}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, ArtifactError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
