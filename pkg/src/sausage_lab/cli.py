"""Command-line entry point: ``sausage-lab <experiment> --config FILE``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .constants import Constants, format_constants
from .experiments import (
    EXPERIMENTS,
    RUNS_FILE,
    SUMMARY_FILE,
    ConfigError,
    ExperimentConfig,
    read_records,
    report,
    run,
)


def load_config(path, experiment: str, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ConfigError(["config: expected a JSON object"])
    data.setdefault("experiment", experiment)
    if data["experiment"] != experiment:
        raise ConfigError([f"experiment: config names {data['experiment']!r} but the command is {experiment!r}"])
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data["out"] = out
    return ExperimentConfig.from_dict(data)


def _run(args) -> int:
    cfg = load_config(args.config, args.experiment, args.seed, args.out).validate()
    record = run(cfg, workers=args.workers)
    out = Path(cfg.out)
    summary = report([record])
    (out / SUMMARY_FILE).write_text(summary.csv_text, encoding="utf-8")
    for name, (value, se) in record.metrics.items():
        print(f"{name:<40} {value:.10g}" + (f" +- {se:.3g}" if se else ""))
    for line in summary.lines:
        print(line)
    for err in record.errors:
        print(f"error: {err}", file=sys.stderr)
    for name in summary.failed:
        print(f"FAILED {name}", file=sys.stderr)
    return summary.exit_code


def _constants(args) -> int:
    if args.config is None:
        if args.dim is None or args.nu is None:
            print("constants: give --dim and --nu, or --config", file=sys.stderr)
            return 2
        print(format_constants(Constants.compute(args.dim, args.nu), args.json))
        return 0
    return _run(args)


def _report(args) -> int:
    records = []
    for path in args.runs:
        records += read_records(path)
    rep = report(records)
    out = Path(args.out) if args.out else Path(args.runs[0]).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / SUMMARY_FILE).write_text(rep.csv_text, encoding="utf-8")
    print(rep.csv_text, end="")
    for line in rep.lines:
        print(line)
    for name in rep.failed:
        print(f"FAILED {name}", file=sys.stderr)
    return rep.exit_code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sausage-lab", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", required=name != "constants", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--workers", type=int, help="worker processes (default: $SAUSAGE_LAB_WORKERS or 1)")
        p.add_argument("--out", help=f"output directory for {RUNS_FILE}, CSV and SVG files")
        if name == "constants":
            p.add_argument("--dim", type=int)
            p.add_argument("--nu", type=float)
            p.add_argument("--json", action="store_true")
            p.set_defaults(func=_constants)
        else:
            p.set_defaults(func=_run)
    p = sub.add_parser("report", help=f"merge {RUNS_FILE} files into {SUMMARY_FILE}")
    p.add_argument("runs", nargs="+", help=f"{RUNS_FILE} files")
    p.add_argument("--out", help="directory for the merged summary (default: next to the first file)")
    p.set_defaults(func=_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(err, file=sys.stderr)
        return 2
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
