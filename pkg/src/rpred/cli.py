"""Command-line front end: run scenarios, emit CSV traces and JSON reports.

Exit codes are a stable contract for CI: 0 all checks passed, 2 a check
failed, 1 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, scenarios, systems
from .dde import ConfigError, DivergenceError
from .predictor import ChainLengthError, GridAlignmentError, min_chain_length

SCHEMA_VERSION = 1

_USAGE_ERROR = 1
_CHECK_FAILED = 2


def _fmt(v: float) -> str:
    if math.isnan(v):
        return "nan"
    return repr(v)


def write_trace_csv(trace, path) -> None:
    """One row per recorded time, full double precision, locale independent."""
    header = ["t"]
    names = list(trace.columns)
    for name in names:
        width = trace.columns[name].shape[1]
        header.extend(f"{name}.{j + 1}" for j in range(width))
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for i, t in enumerate(trace.times):
            row = [_fmt(float(t))]
            for name in names:
                row.extend(_fmt(float(v)) for v in trace.columns[name][i])
            fh.write(",".join(row) + "\n")


def read_trace_csv(path) -> tuple:
    """Inverse of `write_trace_csv`: (times, {channel: array}) with exact values."""
    with open(path, "r", newline="") as fh:
        header = fh.readline().strip().split(",")
        rows = [[float(v) for v in line.strip().split(",")] for line in fh if line.strip()]
    data = np.array(rows)
    times = data[:, 0]
    cols: dict = {}
    order: list = []
    for j, label in enumerate(header[1:], start=1):
        name = label.rsplit(".", 1)[0]
        if name not in cols:
            cols[name] = []
            order.append(name)
        cols[name].append(j)
    return times, {name: data[:, idx] for name, idx in cols.items()}


def _resolve_scenario(ref: str, overrides: list) -> scenarios.Scenario:
    if os.path.exists(ref):
        s = scenarios.load_scenario(ref)
    else:
        s = scenarios.get_scenario(ref)
    if overrides:
        pairs = {}
        for item in overrides:
            if "=" not in item:
                raise scenarios.ScenarioError(f"override {item!r} is not of the form key=value")
            k, v = item.split("=", 1)
            pairs[k.strip()] = v.strip()
        s = scenarios.apply_overrides(s, pairs)
    return s


def _cmd_list(args) -> int:
    for s in scenarios.builtin_scenarios():
        kind = s.controller["kind"]
        print(f"{s.name:24s} plant={s.plant['kind']:16s} controller={kind}")
    return 0


def _write_result(result, out: Path) -> None:
    name = result.scenario.name
    write_trace_csv(result.trace, out / f"{name}.trace.csv")
    report = {
        "schema": SCHEMA_VERSION,
        "scenario": name,
        "passed": result.passed,
        "checks": result.report_dict(),
        "parameters": result.trace.metadata,
    }
    with open(out / f"{name}.report.json", "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    print(f"wrote {out / (name + '.trace.csv')} and {out / (name + '.report.json')}")


def _cmd_simulate(args) -> int:
    if bool(args.all) == bool(args.scenario):
        print("error: give exactly one of --scenario or --all", file=sys.stderr)
        return _USAGE_ERROR
    try:
        if args.all:
            pending = scenarios.builtin_scenarios()
        else:
            pending = [_resolve_scenario(args.scenario, args.override or [])]
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        ok = True
        for s in pending:
            if args.t_end is not None:
                s = scenarios.apply_overrides(s, {"integrator.t_end": args.t_end})
            if args.step is not None:
                s = scenarios.apply_overrides(s, {"integrator.step": args.step})
            result = scenarios.run_scenario(s)
            _write_result(result, out)
            ok = ok and result.passed
    except (scenarios.ScenarioError, ChainLengthError, ConfigError,
            GridAlignmentError, DivergenceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _USAGE_ERROR
    return 0 if ok else _CHECK_FAILED


def _cmd_chain_length(args) -> int:
    try:
        L = args.lipschitz
        if args.output_feedback:
            L = L + L * args.lipschitz_h
        m = min_chain_length(L, args.epsilon, args.delay)
    except (ChainLengthError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _USAGE_ERROR
    print(m)
    return 0


def _cmd_halanay(args) -> int:
    try:
        params = analysis.HalanayParams(a=args.a, b=args.b, delta=args.delta)
        rate = analysis.halanay_rate(params)
        if args.csv is None:
            print(repr(rate))
            return 0
        times, cols = read_trace_csv(args.csv)
        first = next(iter(cols.values()))
        report = analysis.check_halanay_envelope(times, first[:, 0], params, t0=args.t0)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _USAGE_ERROR
    print(json.dumps({"schema": SCHEMA_VERSION, "rate": rate, **report.as_dict()}, indent=2))
    return 0 if report.holds else _CHECK_FAILED


def _cmd_verify(args) -> int:
    try:
        s = _resolve_scenario(args.scenario, args.override or [])
        plant, _, _ = scenarios._build_plant(s.plant)
        seed = int(os.environ.get("RP_SEED", str(systems.DEFAULT_LIPSCHITZ_SEED)))
        lip = systems.verify_lipschitz(plant, samples=args.samples, radius=args.radius, seed=seed)
        result = scenarios.run_scenario(s)
    except (scenarios.ScenarioError, ChainLengthError, ConfigError,
            GridAlignmentError, DivergenceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _USAGE_ERROR
    passed = lip.passed and result.passed
    print(json.dumps({
        "schema": SCHEMA_VERSION,
        "scenario": s.name,
        "lipschitz": lip.as_dict(),
        "checks": result.report_dict(),
        "passed": passed,
    }, indent=2))
    return 0 if passed else _CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rpred",
        description="Sequential-predictor delay compensation toolkit: "
                    "simulate benchmark scenarios, size predictor chains, "
                    "and run Halanay/GAS/ISS checks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("list", help="list built-in scenarios")
    p.set_defaults(func=_cmd_list)

    p = sub.add_parser("simulate", help="run a scenario, write trace CSV and report JSON")
    p.add_argument("--scenario", default=None, help="built-in name or TOML file path")
    p.add_argument("--all", action="store_true", help="run every built-in scenario")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--t-end", type=float, default=None)
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--override", action="append", metavar="KEY=VALUE",
                   help="dotted scenario override, e.g. predictor.m=3")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("chain-length", help="minimum admissible predictor chain length")
    p.add_argument("--lipschitz", type=float, required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delay", type=float, required=True)
    p.add_argument("--output-feedback", action="store_true",
                   help="use the output-feedback constant L + L*Lh")
    p.add_argument("--lipschitz-h", type=float, default=1.0)
    p.set_defaults(func=_cmd_chain_length)

    p = sub.add_parser("halanay", help="decay rate, optionally check a CSV series")
    p.add_argument("--a", type=float, required=True)
    p.add_argument("--b", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--csv", default=None, help="CSV with a time column and a scalar series")
    p.add_argument("--t0", type=float, default=0.0)
    p.set_defaults(func=_cmd_halanay)

    p = sub.add_parser("verify", help="Lipschitz check plus the scenario's analysis suite")
    p.add_argument("--scenario", required=True)
    p.add_argument("--override", action="append", metavar="KEY=VALUE")
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--radius", type=float, default=10.0)
    p.set_defaults(func=_cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
