"""Command-line front end.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    BENCHMARK_FAULT_BUSES,
    DEFAULT_CCL_RESOLUTION,
    DEFAULT_CCL_UPPER,
    CclResult,
    Disturbance,
    StabilityCriteria,
    ccl_csv,
    compare_fluctuations,
    fluctuation_csv,
    is_stable,
    penetration_sweep,
    run_ccl_jobs,
    run_disturbance,
    standard_disturbances,
    summary_json,
    sweep_csv,
    sweep_peak,
)
from .case import CaseError, NetworkCase, bundled_case_path, load_case
from .control import DEFAULT_PER_VEHICLE_KW, DEFAULT_SATURATION_MHZ, build_fleet
from .dynamics import AlgebraicError, SimulationError
from .powerflow import PowerFlowError, initialize
from .report import timeseries_csv, with_header, write_text
from .scenarios import branch_outage, fault_at, load_events, load_step

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3

DEFAULT_PENETRATIONS = (0.0, 1.0, 2.0, 4.0, 5.5, 7.0, 10.0)


class UsageError(ValueError):
    pass


def _csv_numbers(kind):
    def parse(text: str):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}") from None
    return parse


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--case", type=Path, default=None, help="case JSON (default: bundled 39-bus case)")
    p.add_argument("--dt", type=float, default=1e-3, help="integration step, s")
    p.add_argument("--horizon", type=float, default=10.0, help="simulated time, s")
    p.add_argument("--output-interval", type=float, default=1e-2, help="sampling interval, s")
    p.add_argument("--n-pev", type=int, default=50_000, help="vehicles in the controlled fleet")
    p.add_argument("--per-vehicle-kw", type=float, default=DEFAULT_PER_VEHICLE_KW)
    p.add_argument("--saturation-mhz", type=float, default=DEFAULT_SATURATION_MHZ)
    p.add_argument("--output-dir", type=Path, default=Path("."))


def _add_disturbance(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("disturbance (a --scenario file overrides these)")
    g.add_argument("--scenario", type=Path, help="JSON array of events")
    g.add_argument("--fault-bus", type=int)
    g.add_argument("--fault-start", type=float, default=1.0)
    g.add_argument("--fault-duration", type=float)
    g.add_argument("--trip-branch", help="branch id, e.g. 16-21")
    g.add_argument("--trip-start", type=float, default=1.0)
    g.add_argument("--trip-duration", type=float, help="restore after this many seconds (default: never)")
    g.add_argument("--step-bus", type=int)
    g.add_argument("--step-fraction", type=float, help="load change, e.g. -0.1 for a 10%% decrease")
    g.add_argument("--step-start", type=float, default=1.0)
    g.add_argument("--step-hold", type=float, help="revert after this many seconds (default: never)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridtide", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one scenario, write timeseries.csv and summary.json")
    _add_common(p)
    _add_disturbance(p)

    p = sub.add_parser("metrics", help="fluctuation metrics with and without the fleet")
    _add_common(p)
    _add_disturbance(p)
    p.add_argument("--standard-set", action="store_true", help="run the six standard disturbances")
    p.add_argument("--baseline-n-pev", type=int, default=0, help="fleet size of the reference run")

    p = sub.add_parser("ccl", help="critical clearing times per fault bus")
    _add_common(p)
    p.add_argument("--buses", type=_csv_numbers(int), default=list(BENCHMARK_FAULT_BUSES))
    p.add_argument("--fault-start", type=float, default=1.0)
    p.add_argument("--resolution", type=float, default=DEFAULT_CCL_RESOLUTION)
    p.add_argument("--upper", type=float, default=DEFAULT_CCL_UPPER, help="longest fault duration tried, s")

    p = sub.add_parser("sweep", help="average t_ccl increase versus fleet penetration")
    _add_common(p)
    p.add_argument("--penetrations", type=_csv_numbers(float), default=list(DEFAULT_PENETRATIONS),
                   help="percent of the 5 M vehicle fleet; must include 0")
    p.add_argument("--buses", type=_csv_numbers(int), default=list(BENCHMARK_FAULT_BUSES))
    p.add_argument("--fault-start", type=float, default=1.0)
    p.add_argument("--resolution", type=float, default=DEFAULT_CCL_RESOLUTION)
    p.add_argument("--upper", type=float, default=DEFAULT_CCL_UPPER)

    p = sub.add_parser("validate", help="lint a case file and solve its power flow")
    p.add_argument("--case", type=Path, default=None)
    return parser


# ---------------------------------------------------------------- helpers

def _load(args) -> NetworkCase:
    path = args.case or bundled_case_path()
    case, _ = initialize(load_case(path))
    return case


def _events(args):
    if args.scenario is not None:
        return load_events(args.scenario)
    events = []
    if args.fault_bus is not None or args.fault_duration is not None:
        if args.fault_bus is None or args.fault_duration is None:
            raise UsageError("--fault-bus and --fault-duration go together")
        events += fault_at(args.fault_bus, args.fault_start, args.fault_duration)
    if args.trip_branch is not None:
        events += branch_outage(args.trip_branch, args.trip_start, args.trip_duration)
    if args.step_bus is not None or args.step_fraction is not None:
        if args.step_bus is None or args.step_fraction is None:
            raise UsageError("--step-bus and --step-fraction go together")
        events += load_step(args.step_bus, args.step_start, args.step_fraction, args.step_hold)
    return events


def _check_run(args) -> None:
    if not args.dt > 0:
        raise UsageError("--dt must be positive")
    if args.output_interval < args.dt:
        raise UsageError("--output-interval must be at least --dt")
    if not args.horizon > 0:
        raise UsageError("--horizon must be positive")
    if args.n_pev < 0:
        raise UsageError("--n-pev must be non-negative")


def _fleet(case, args, n_pev=None):
    n = args.n_pev if n_pev is None else n_pev
    if n == 0:
        return None
    return build_fleet(case, n, args.per_vehicle_kw, args.saturation_mhz)


def _config(args, case: NetworkCase, **extra) -> dict:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    cfg.pop("case", None)
    return {"command": args.command, "config": cfg, "case": str(args.case or bundled_case_path().name),
            "case_checksum": case.checksum, **extra}


def _run_kw(args) -> dict:
    return dict(horizon=args.horizon, dt=args.dt, output_interval=args.output_interval)


def _fleet_kw(args) -> dict:
    return dict(per_vehicle_kw=args.per_vehicle_kw, saturation_mhz=args.saturation_mhz)


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    _check_run(args)
    case = _load(args)
    events = _events(args)
    if events and max(ev.t for ev in events) > args.horizon:
        raise UsageError("horizon ends before the last event")
    ts = run_disturbance(case, events, _fleet(case, args), raise_on_failure=False, **_run_kw(args))
    meta = _config(args, case, events=[ev.to_dict() for ev in events])
    out = args.output_dir
    write_text(out / "timeseries.csv", timeseries_csv(ts, meta))
    criteria = StabilityCriteria()
    verdict = None
    if ts.status != "solver_failure" and args.horizon >= criteria.settle_window_s:
        verdict = "stable" if is_stable(ts, criteria) else "unstable"
    final = {
        "t": float(ts.times[-1]) if len(ts) else None,
        "omega_hz": dict(zip(map(str, ts.gen_buses), ts.omega_hz[-1].tolist())) if len(ts) else {},
        "phi_rad": dict(zip(map(str, ts.gen_buses), ts.phi[-1].tolist())) if len(ts) else {},
        "v_pu": dict(zip(map(str, ts.acvg_buses), ts.v_mag[-1].tolist())) if len(ts) else {},
    }
    payload = {
        "run": meta,
        "status": ts.status,
        "message": ts.message,
        "verdict": verdict,
        "max_angle_separation_deg": math.degrees(ts.max_angle_separation),
        "final_state": final,
        "solver": ts.stats,
    }
    write_text(out / "summary.json", summary_json(payload, case))
    print(f"{ts.status}: verdict {verdict}; wrote {out / 'timeseries.csv'} and {out / 'summary.json'}")
    if ts.status == "solver_failure":
        print(f"error: {ts.message}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_metrics(args) -> int:
    _check_run(args)
    case = _load(args)
    if args.standard_set:
        disturbances = standard_disturbances()
    else:
        events = _events(args)
        if not events:
            raise UsageError("metrics needs a disturbance (shortcut flags, --scenario or --standard-set)")
        span = max(ev.t for ev in events) - min(ev.t for ev in events)
        disturbances = [Disturbance("custom", span, tuple(events))]
    reference = _fleet(case, args, args.baseline_n_pev)
    controlled = _fleet(case, args)
    rows = []
    for d in disturbances:
        rows.append(compare_fluctuations(case, d, controlled, reference=reference, **_run_kw(args)))
    meta = _config(args, case)
    write_text(args.output_dir / "metrics.csv", with_header(meta, fluctuation_csv(rows)))
    payload = {"run": meta, "rows": [
        {"disturbance": r.disturbance, "duration_s": r.duration, "without": asdict(r.without),
         "with": asdict(r.with_control), "speed_reduction_pct": r.speed_reduction_pct,
         "voltage_reduction_pct": r.voltage_reduction_pct} for r in rows]}
    write_text(args.output_dir / "summary.json", summary_json(payload, case))
    for r in rows:
        print(f"{r.disturbance}: speed -{r.speed_reduction_pct:.1f}%, voltage -{r.voltage_reduction_pct:.1f}%")
    return EXIT_OK


def _ccl_args(args) -> dict:
    if args.resolution <= 0:
        raise UsageError("--resolution must be positive")
    return dict(upper=args.upper, t_start=args.fault_start, dt=args.dt)


def cmd_ccl(args) -> int:
    _check_run(args)
    case = _load(args)
    unknown = [b for b in args.buses if b not in case.bus_index]
    if unknown:
        raise UsageError(f"unknown bus(es): {', '.join(map(str, unknown))}")
    kw = _ccl_args(args)
    kw["fleet_kw"] = _fleet_kw(args)
    sizes = [0] if args.n_pev == 0 else [0, args.n_pev]
    jobs = [(case, n, b, args.resolution, args.horizon, dict(kw)) for b in args.buses for n in sizes]
    results = run_ccl_jobs(jobs)
    if args.n_pev == 0:
        pairs = [(r, _blank(r)) for r in results]
    else:
        pairs = list(zip(results[0::2], results[1::2]))
    meta = _config(args, case)
    write_text(args.output_dir / "ccl.csv", with_header(meta, ccl_csv(pairs)))
    payload = {"run": meta, "results": [{"without": asdict(a), "with": asdict(b) if b.simulations else None}
                                        for a, b in pairs]}
    write_text(args.output_dir / "summary.json", summary_json(payload, case))
    for a, b in pairs:
        print(f"bus {a.bus}: {a.describe()}" + (f" -> {b.describe()}" if b.simulations else ""))
    return EXIT_OK


def _blank(r):
    return CclResult(r.bus, None, r.resolution, None, None, bracketed=False, upper_bound=r.upper_bound, simulations=0)


def cmd_sweep(args) -> int:
    _check_run(args)
    case = _load(args)
    if 0.0 not in args.penetrations:
        raise UsageError("--penetrations must include 0")
    kw = _ccl_args(args)
    kw["fleet_kw"] = _fleet_kw(args)
    points = penetration_sweep(case, args.penetrations, args.buses, args.resolution, args.horizon, **kw)
    peak = sweep_peak(points)
    meta = _config(args, case)
    write_text(args.output_dir / "sweep.csv", with_header(meta, sweep_csv(points)))
    payload = {"run": meta, "points": [asdict(p) for p in points],
               "peak_penetration_pct": peak.penetration_pct if peak else None}
    write_text(args.output_dir / "summary.json", summary_json(payload, case))
    for p in points:
        avg = "n/a" if p.avg_ccl_increase_pct is None else f"{p.avg_ccl_increase_pct:.2f}%"
        print(f"{p.penetration_pct:g}%: n_pev={p.n_pev} avg increase {avg}" + (f" gaps {list(p.gaps)}" if p.gaps else ""))
    if peak:
        print(f"peak at {peak.penetration_pct:g}% penetration")
    return EXIT_OK


def cmd_validate(args) -> int:
    path = args.case or bundled_case_path()
    case = load_case(path)
    case, pf = initialize(case)
    print(f"{path}: {case.name}")
    print(f"  {len(case.buses)} buses, {len(case.branches)} branches, {case.n} generators, {case.m} ACVG buses")
    print(f"  power flow converged in {pf.iterations} iterations (max mismatch {pf.max_mismatch:.2e} pu)")
    print(f"  checksum {case.checksum}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "metrics": cmd_metrics,
    "ccl": cmd_ccl,
    "sweep": cmd_sweep,
    "validate": cmd_validate,
}


def _origin(exc: BaseException) -> str:
    module = type(exc).__module__.rsplit(".", 1)[-1]
    return "input" if module == "builtins" else module


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (PowerFlowError, SimulationError, AlgebraicError, np.linalg.LinAlgError) as exc:
        print(f"error ({_origin(exc)}): {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (CaseError, ValueError, OSError) as exc:
        print(f"error ({_origin(exc)}): {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
