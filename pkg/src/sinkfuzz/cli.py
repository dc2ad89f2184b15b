"""Command-line entry point: ``sinkfuzz campaign run``, ``detect`` and ``bench``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .benchmarks import get_case, suite_manifest, verify_ground_truth
from .campaign import MODE_ALIASES, MODES, CampaignConfig, ConfigError, run_campaign
from .detection import FilterConfig, detect
from .minij import load_program
from .minij.catalog import SUPPORTED_CWES
from .minij.errors import MiniJError
from .oracle import make_oracle
from .sinks import UnknownCWE

EXIT_OK, EXIT_FAILURES, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


def _cwes(text: str) -> list:
    if text == "all":
        return sorted(SUPPORTED_CWES)
    return [c.strip() for c in text.split(",") if c.strip()]


def _campaign_config(args) -> CampaignConfig:
    raw = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
    if args.case:
        case = get_case(args.case)
        raw.setdefault("target", str(case.program_path))
        raw.setdefault("harness", case.harness)
        raw.setdefault("sink_threshold", case.sink_threshold)
    overrides = {
        "target": args.target, "harness": args.harness,
        "cwes": _cwes(args.cwe) if args.cwe else None, "oracle": args.oracle,
        "mode": args.mode, "seed": args.seed, "budget_execs": args.budget_execs,
        "nocov_execs": args.nocov_execs, "wall_clock": args.wall_clock, "workers": args.workers,
        "output_dir": args.out,
    }
    raw.update({k: v for k, v in overrides.items() if v is not None})
    if raw.get("oracle") == "remote" and args.oracle_config:
        with open(args.oracle_config, encoding="utf-8") as fh:
            raw["oracle_params"] = json.load(fh)
    if not raw.get("target"):
        raise ConfigError("a target is required (--target, --case or config file)")
    if not raw.get("cwes"):
        raw["cwes"] = sorted(SUPPORTED_CWES)
    return CampaignConfig.from_dict(raw)


def cmd_campaign_run(args) -> int:
    config = _campaign_config(args)
    report = run_campaign(config)
    agg = report.aggregates()
    print(f"mode={config.mode} retained={len(report.retained())} exploited={agg['exploited']} "
          f"reached_only={agg['reached_only']} not_reached={agg['not_reached']} "
          f"executions={report.fuzz_executions} oracle_calls={report.oracle_usage.get('calls', 0)} "
          f"stop={report.stop_reason}")
    if config.output_dir:
        print(f"report: {Path(config.output_dir) / 'report.json'}")
    else:
        sys.stdout.write(report.to_json())
    return EXIT_FAILURES if report.failures else EXIT_OK


def cmd_detect(args) -> int:
    program = load_program(args.target, harness=args.harness)
    oracle = make_oracle(args.oracle) if args.oracle else None
    rep = detect(program, _cwes(args.cwe), oracle, FilterConfig(threshold=args.threshold))
    sys.stdout.write(rep.to_json())
    return EXIT_OK


def cmd_bench_list(args) -> int:
    for case in suite_manifest():
        print(f"{case.id:24s} {case.cwe}  {','.join(case.tags)}")
    return EXIT_OK


def cmd_bench_verify(args) -> int:
    cases = [get_case(c) for c in args.cases] if args.cases else suite_manifest()
    bad = 0
    for case in cases:
        result = verify_ground_truth(case)
        print(f"{'PASS' if result else 'FAIL'} {case.id}")
        for f in result.failures:
            print(f"    {f}")
        bad += not result
    return EXIT_FAILURES if bad else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sinkfuzz", description="Sink-centric fuzzing campaigns over MiniJ programs.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    camp = sub.add_parser("campaign", help="run campaigns").add_subparsers(dest="action", required=True)
    run = camp.add_parser("run", help="detect sinks, then fuzz and run the agents")
    run.add_argument("--target", help="MiniJ program (.mj)")
    run.add_argument("--case", help="bundled benchmark case id (sets target, harness and filter threshold)")
    run.add_argument("--harness", help="entry function (default: harness)")
    run.add_argument("--cwe", help="comma-separated CWE ids, or 'all'")
    run.add_argument("--oracle", help="heuristic | replay:FILE | remote")
    run.add_argument("--oracle-config", help="JSON endpoint settings for the remote oracle")
    run.add_argument("--mode", choices=sorted(MODES) + sorted(MODE_ALIASES))
    run.add_argument("--budget-execs", type=int)
    run.add_argument("--nocov-execs", type=int)
    run.add_argument("--wall-clock", type=float, help="seconds; optional overlay on the execution budget")
    run.add_argument("--workers", type=int, help="fuzzer instances sharing one corpus")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="output directory")
    run.add_argument("--config", help="JSON campaign config; flags override it")
    run.set_defaults(func=cmd_campaign_run)

    det = sub.add_parser("detect", help="run sink detection only")
    det.add_argument("--target", required=True)
    det.add_argument("--harness", default="harness")
    det.add_argument("--cwe", default="all")
    det.add_argument("--oracle")
    det.add_argument("--threshold", type=int, default=10)
    det.set_defaults(func=cmd_detect)

    bench = sub.add_parser("bench", help="bundled benchmark suite").add_subparsers(dest="action", required=True)
    bench.add_parser("list").set_defaults(func=cmd_bench_list)
    ver = bench.add_parser("verify", help="replay ground-truth inputs")
    ver.add_argument("cases", nargs="*")
    ver.set_defaults(func=cmd_bench_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UnknownCWE, MiniJError, KeyError, ValueError) as err:
        print(f"sinkfuzz: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"sinkfuzz: I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
