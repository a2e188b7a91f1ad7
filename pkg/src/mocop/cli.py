"""Command line: ``mocop run|simulate|analyze|report``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .analysis import StatReport, analyze
from .core import ConfigError, config_from_dict, load_config_file, set_dotted, validate_config
from .pipeline import StorageError, resolve_out_dir, run
from .reporting import UnwritablePath, report


def _parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def build_config(args) -> dict:
    raw = load_config_file(args.config) if args.config else {}
    overrides = {
        "offline": True if args.offline else None,
        "seed": args.seed,
        "n_cycles": args.cycles,
        "n_prompts": args.prompts,
        "rescale_sem": True if args.rescale_sem else None,
        "literal_descent": True if args.literal_descent else None,
    }
    for key, value in overrides.items():
        if value is not None:
            raw[key] = value
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError([f"--set {item}: expected dotted.key=value"])
        set_dotted(raw, key, _parse_value(value))
    return raw


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--offline", action="store_true", help="force every endpoint to the simulator")
    p.add_argument("--seed", type=int)
    p.add_argument("--cycles", type=int)
    p.add_argument("--prompts", type=int)
    p.add_argument("--out", help="output directory (default $MOCOP_OUT_DIR or ./mocop-out)")
    p.add_argument("--rescale-sem", action="store_true", help="rescale semantic safety onto [0, 1]")
    p.add_argument("--literal-descent", action="store_true", help="descend J when updating theta")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key by dotted path; repeatable")
    p.add_argument("--no-report", action="store_true", help="skip analysis and report after the run")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mocop", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    _add_run_flags(sub.add_parser("run", help="run the evaluation loop"))
    _add_run_flags(sub.add_parser("simulate", help="run fully offline (same as run --offline)"))
    p = sub.add_parser("analyze", help="analyse a run directory or records.jsonl")
    p.add_argument("log")
    p.add_argument("--cycles", choices=("last", "all"), default="last")
    p.add_argument("--out", help="where to write the analysis JSON")
    p = sub.add_parser("report", help="write summary and CSVs from an analysis JSON")
    p.add_argument("analysis")
    p.add_argument("--out", help="report directory")
    return parser


def _finish_run(result) -> None:
    m = result.manifest
    print(f"{m.run_id}: {m.status} after {m.cycles_completed} cycle(s); outputs in {result.out_dir}")
    for model, c in m.counts.items():
        print(f"  {model}: {c.successes}/{c.attempts} scored, {c.failures} failed")


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb in ("run", "simulate"):
            if args.verb == "simulate":
                args.offline = True
            cfg = validate_config(config_from_dict(build_config(args)))
            result = run(cfg, resolve_out_dir(args.out))
            _finish_run(result)
            if not args.no_report:
                rep = analyze(result.out_dir)
                rep.save(result.out_dir / "analysis.json")
                report(rep, result.out_dir / "report")
            return 0 if result.manifest.status != "failed" else 1
        if args.verb == "analyze":
            rep = analyze(args.log, cycles=args.cycles)
            base = Path(args.log)
            dest = Path(args.out) if args.out else (base if base.is_dir() else base.parent) / "analysis.json"
            rep.save(dest)
            print(f"analysis written to {dest}")
            return 0
        if args.verb == "report":
            rep = StatReport.load(args.analysis)
            dest = Path(args.out) if args.out else Path(args.analysis).parent / "report"
            paths = report(rep, dest)
            print(f"{len(paths)} files written to {dest}")
            return 0
    except ConfigError as exc:
        print("configuration error:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  {problem}", file=sys.stderr)
        return 2
    except (StorageError, UnwritablePath, FileNotFoundError) as exc:
        print(f"storage error: {exc}", file=sys.stderr)
        return 3
    return 1


if __name__ == "__main__":
    sys.exit(main())
