"""Command-line front end: run one experiment config, run a named suite,
or merge reports to CSV.

Exit codes: 0 done, 1 failed suite assertion, 2 config/schema violation,
3 training divergence.
"""

import argparse
import json
import os
import sys

from .configio import (
    ConfigError,
    MERGED_HEADER,
    curves_rows,
    load_config,
    merge_reports,
    run_experiment,
    write_csv_atomic,
    write_json_atomic,
)
from .harness import DivergenceError
from .suites import run_suite, suite_names

__all__ = ["main"]

ENV_OUTDIR = "SELFSUP_OUTDIR"


def _out_dir(cfg_dir: str = None) -> str:
    env = os.environ.get(ENV_OUTDIR)
    if env:
        return env
    if cfg_dir:
        return cfg_dir
    return os.getcwd()


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    out_dir = _out_dir(cfg.get("out_dir"))
    try:
        report = run_experiment(cfg)
    except DivergenceError as e:
        print(f"diverged: {e} {e.diagnostic}", file=sys.stderr)
        return 3
    base = os.path.splitext(os.path.basename(args.config))[0]
    report_path = os.path.join(out_dir, f"{base}_report.json")
    curves_path = os.path.join(out_dir, f"{base}_curves.csv")
    write_json_atomic(report_path, report)
    rows, header = curves_rows(report)
    write_csv_atomic(curves_path, rows, header)
    print(f"report: {report_path}")
    print(f"curves: {curves_path}")
    print(f"hash: {report['report_hash']}")
    return 0


def cmd_suite(args) -> int:
    try:
        result = run_suite(args.name, seed=args.seed, scale=args.scale)
    except KeyError as e:
        print(f"suite error: {e.args[0]}", file=sys.stderr)
        return 2
    out_dir = _out_dir()
    path = os.path.join(out_dir, f"suite_{args.name}_seed{args.seed}.json")
    write_json_atomic(path, result.to_dict())
    for r in result.rows:
        flag = "pass" if r["passed"] else (
            "expected-fail" if r["expected_fail"] else "FAIL"
        )
        se = "" if r["se"] is None else f" se={r['se']:.3g}"
        print(
            f"[{flag}] {result.name}/{r['method']} {r['metric']}: "
            f"value={r['value']:.6g} oracle={r['oracle']:.6g} "
            f"tol={r['tol']:.3g}{se}"
        )
    print(f"wrote {path}")
    failed = result.failed_rows()
    if failed:
        for r in failed:
            print(
                f"failed: {result.name}/{r['method']} {r['metric']} "
                f"value={r['value']:.6g} oracle={r['oracle']:.6g} tol={r['tol']:.3g}",
                file=sys.stderr,
            )
        return 1
    return 0


def cmd_report(args) -> int:
    try:
        rows = merge_reports(args.files)
    except ConfigError as e:
        print(f"report error: {e}", file=sys.stderr)
        return 2
    write_csv_atomic(args.out, rows, MERGED_HEADER)
    print(f"wrote {args.out} ({len(rows)} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="selfsup",
        description="self-supervised loss laboratory: run, verify, report",
    )
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("run", help="run one experiment config")
    pr.add_argument("config", help="path to a JSON experiment config")
    pr.set_defaults(fn=cmd_run)

    ps = sub.add_parser("suite", help="run a named verification suite")
    ps.add_argument("name", help=f"one of {', '.join(suite_names())}")
    ps.add_argument("--seed", type=int, default=0)
    ps.add_argument("--scale", choices=("smoke", "full"), default="smoke")
    ps.set_defaults(fn=cmd_suite)

    pp = sub.add_parser("report", help="merge run/suite reports into CSV")
    pp.add_argument("files", nargs="*", help="report JSON files")
    pp.add_argument("--out", required=True, help="merged CSV path")
    pp.set_defaults(fn=cmd_report)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
