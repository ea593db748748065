"""Command-line entry point: ``zerosiam {run,sweep,accept,export-data,preset}``.

Exit codes: 0 success, 2 config error, 3 acceptance failure, 4 poisoned run.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from . import acceptance
from .config import config_to_dict, load_config, load_sweep
from .runner import run, source_setup, build_stream, sweep
from .streams import ConfigError, export_dataset, generate_source

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ACCEPTANCE = 3
EXIT_POISONED = 4


def _load(args):
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.preset:
        cfg = acceptance.preset(args.preset)
    elif args.config:
        cfg = load_config(args.config)
    else:
        raise ConfigError("one of --config or --preset is required")
    if getattr(args, "method", None):
        cfg = replace(cfg, method=replace(cfg.method, name=args.method))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    cfg.validate()
    return cfg


def _cmd_run(args) -> int:
    cfg = _load(args)
    if args.plots:
        cfg = replace(cfg, emit_plots=True)
    out = args.out or cfg.output_dir
    o = run(cfg, out)
    cols = ("run_id", "method", "steps", "online_accuracy", "noadapt_accuracy", "verdict", "failed_step")
    s = o.summary()
    print("\t".join(cols))
    print("\t".join("" if s[c] is None else f"{s[c]:.4f}" if isinstance(s[c], float) else str(s[c]) for c in cols))
    print(f"artifacts in {Path(out).resolve()}", file=sys.stderr)
    return EXIT_POISONED if o.poisoned else EXIT_OK


def _cmd_sweep(args) -> int:
    spec = load_sweep(args.config, args.axes)
    out = args.out or spec.base.output_dir
    report = sweep(spec, args.jobs, out)
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def _cmd_accept(args) -> int:
    if args.only:
        results = acceptance.Suite(args.jobs).run(sorted(set(args.only)))
    else:
        results = acceptance.run_all(args.jobs, args.rerun_jobs)
    print("\n".join(acceptance.report_lines(results)))
    if args.out:
        acceptance.render_report(results, args.out)
        print(f"report in {Path(args.out).resolve()}", file=sys.stderr)
    return EXIT_OK if all(r.passed for r in results) else EXIT_ACCEPTANCE


def _cmd_export(args) -> int:
    cfg = _load(args)
    if args.what == "source":
        data = generate_source(cfg.task)
    else:
        source, pool = source_setup(cfg)
        data = build_stream(cfg, source, pool)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / f"{cfg.run_id}.{args.what}.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    export_dataset(data, out)
    print(out)
    return EXIT_OK


def _cmd_preset(args) -> int:
    print(json.dumps(config_to_dict(acceptance.preset(args.name)), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zerosiam", description="Test-time entropy minimization experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def source_args(sp):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--preset", choices=acceptance.PRESETS, help="use a built-in benchmark config")

    r = sub.add_parser("run", help="run one experiment")
    source_args(r)
    r.add_argument("--method", choices=("noadapt", "tent", "filtered_tent", "zerosiam"), help="override the method")
    r.add_argument("--out", help="output directory (default: config output_dir)")
    r.add_argument("--seed", type=int, help="override the run seed")
    r.add_argument("--plots", action="store_true", help="write SVG panels")
    r.set_defaults(fn=_cmd_run)

    s = sub.add_parser("sweep", help="run the cross product of axis values")
    s.add_argument("--config", required=True)
    s.add_argument("--axes", required=True, help="JSON object mapping axis name to a list of values")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", help="output directory (default: config output_dir)")
    s.set_defaults(fn=_cmd_sweep)

    a = sub.add_parser("accept", help="run the acceptance suite")
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--rerun-jobs", type=int, default=4, help="parallelism of the determinism re-run")
    a.add_argument("--only", type=int, nargs="+", choices=sorted(acceptance.CRITERIA), help="run a subset")
    a.add_argument("--out", help="write acceptance.tsv and SVG panels here")
    a.set_defaults(fn=_cmd_accept)

    e = sub.add_parser("export-data", help="write the synthetic dataset in the text format")
    source_args(e)
    e.add_argument("--what", choices=("stream", "source"), default="stream")
    e.add_argument("--out", help="output file")
    e.set_defaults(fn=_cmd_export)

    pr = sub.add_parser("preset", help="print a built-in benchmark config as JSON")
    pr.add_argument("name", choices=acceptance.PRESETS)
    pr.set_defaults(fn=_cmd_preset)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
