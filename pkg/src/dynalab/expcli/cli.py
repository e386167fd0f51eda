"""``dynalab`` command line: run, aggregate, timing, sweep-expand."""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import List, Optional

from ..dyna import format_rows
from .aggregate import NORMALIZERS, TIMING_HEADER, time_runs, write_outputs
from .config import ConfigError, emit_run_config, parse, with_master_seed
from .runner import EXIT_OK, EXIT_TOTAL_FAILURE, run_experiment

SEED_ENV = "DYNALAB_SEED"


def load_spec(path: str):
    spec = parse(Path(path).read_text())
    if os.environ.get(SEED_ENV):
        spec = with_master_seed(spec, int(os.environ[SEED_ENV]))
    return spec


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynalab", description="Dyna-style RL experiment runner")
    sub = p.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", help="execute every run of an experiment file")
    r.add_argument("spec")
    r.add_argument("--parallel", type=int, default=1)
    r.add_argument("--out")
    a = sub.add_parser("aggregate", help="normalized returns, timing and plot data")
    a.add_argument("dir")
    a.add_argument("--normalizer", choices=NORMALIZERS, default="per_task_max_mean")
    t = sub.add_parser("timing", help="sec-per-env-step table")
    t.add_argument("dir")
    s = sub.add_parser("sweep-expand", help="print the run matrix without executing")
    s.add_argument("spec")
    s.add_argument("--full", action="store_true", help="print every config field")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "run":
            spec = load_spec(args.spec)
            status = run_experiment(spec, args.parallel, args.out)
            out = args.out or spec.out or spec.name
            write_outputs(out)
            print(f"{len(spec.runs())} runs -> {out} (exit {status})")
            return status
        if args.verb == "aggregate":
            written = write_outputs(args.dir, normalizer=args.normalizer)
            sys.stdout.write(written["aggregate"].read_text())
            return EXIT_OK
        if args.verb == "timing":
            sys.stdout.write(format_rows(time_runs(args.dir), TIMING_HEADER))
            return EXIT_OK
        spec = load_spec(args.spec)
        for run in spec.runs():
            print(run.run_id)
            if args.full:
                print("".join(f"  {line}\n" for line in emit_run_config(run.config).splitlines()),
                      end="")
        return EXIT_OK
    except (ConfigError, FileNotFoundError) as exc:
        print(f"dynalab: {exc}", file=sys.stderr)
        return EXIT_TOTAL_FAILURE


if __name__ == "__main__":
    sys.exit(main())
