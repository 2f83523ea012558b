#!/usr/bin/env python3
"""Run the 123-bus reference scenario end to end and print a summary.

Equivalent to::

    gridscope simulate -c configs/reference_123.json -o <out>
    gridscope run      -c configs/reference_123.json -o <out>
    gridscope report   -o <out>

but keeps per-stage timings on one screen and, with ``--twice``, runs
the whole pipeline a second time into a sibling directory to demonstrate
that the content digests match byte for byte.
"""

import argparse
import sys
import time
from pathlib import Path

from gridscope.artifacts import RunManifest
from gridscope.pipeline import load_config, render_report, run_stages, simulate

ROOT = Path(__file__).resolve().parent.parent


def run_once(config, out_dir: Path) -> RunManifest:
    t0 = time.perf_counter()
    simulate(config, out_dir)
    run_stages(config, out_dir)
    render_report(out_dir)
    manifest = RunManifest.load(out_dir)
    total = time.perf_counter() - t0
    print(f"\nrun directory: {out_dir}")
    for name, rec in manifest.stages.items():
        print(f"  {name:14s} {rec.wall_clock_s:7.2f} s")
    print(f"  {'total':14s} {total:7.2f} s")
    print(f"content digest: {manifest.content_digest}")
    return manifest


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path,
                        default=ROOT / "configs" / "reference_123.json")
    parser.add_argument("--out", type=Path, default=ROOT / "runs" / "reference_123")
    parser.add_argument("--twice", action="store_true",
                        help="repeat into <out>_twin and compare digests")
    args = parser.parse_args()

    config = load_config(args.config)
    first = run_once(config, args.out)
    if args.twice:
        twin = run_once(config, args.out.with_name(args.out.name + "_twin"))
        same = first.content_digest == twin.content_digest
        print(f"\ndigests identical: {same}")
        if not same:
            return 1
    print(f"\nreport: {args.out / 'report' / 'report.md'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
