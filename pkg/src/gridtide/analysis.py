"""Experiment harness: fluctuation metrics, critical clearing times, penetration sweeps."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .case import NetworkCase
from .control import AcvgFleet, FleetController, build_fleet
from .dynamics import DEFAULT_DT, DEFAULT_OUTPUT_INTERVAL, Machines, TimeSeries, initial_state, simulate, steps_for
from .scenarios import DisturbanceEvent, branch_outage, check_alignment, compile_scenario, fault_at, load_step

FLEET_SIZE_TOTAL = 5_000_000  # light vehicles behind the whole system
DEFAULT_HORIZON = 10.0
DEFAULT_FAULT_START = 1.0
DEFAULT_CCL_UPPER = 1.0
DEFAULT_CCL_RESOLUTION = 1e-3
BENCHMARK_FAULT_BUSES = (1, 4, 11, 16, 20, 24, 32, 37)


def n_pev_for(penetration_pct: float) -> int:
    return int(round(penetration_pct / 100.0 * FLEET_SIZE_TOTAL))


def worker_count() -> int:
    """Concurrency cap from ``GRIDTIDE_THREADS``, defaulting to the CPU count."""
    raw = os.environ.get("GRIDTIDE_THREADS", "")
    if raw.strip():
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"GRIDTIDE_THREADS must be a positive integer, got {raw!r}") from None
        if n < 1:
            raise ValueError(f"GRIDTIDE_THREADS must be a positive integer, got {raw!r}")
        return n
    return os.cpu_count() or 1


# ---------------------------------------------------------------- running

def run_disturbance(
    case: NetworkCase,
    events: Sequence[DisturbanceEvent] = (),
    fleet: AcvgFleet | None = None,
    *,
    horizon: float = DEFAULT_HORIZON,
    dt: float = DEFAULT_DT,
    output_interval: float = DEFAULT_OUTPUT_INTERVAL,
    stop_on_separation: float | None = None,
    raise_on_failure: bool = True,
) -> TimeSeries:
    """Simulate ``events`` on an initialized case, with or without a fleet."""
    scenario = compile_scenario(case, events)
    check_alignment(scenario, dt, horizon)
    controller = None
    if fleet is not None and fleet.n_pev_total > 0:
        controller = FleetController(fleet, case.mva_base)
    return simulate(
        initial_state(case), horizon, dt, scenario, controller, Machines.from_case(case),
        output_interval=output_interval,
        stop_on_separation=stop_on_separation,
        raise_on_failure=raise_on_failure,
        mva_base=case.mva_base,
    )


# ---------------------------------------------------------------- fluctuation metrics

@dataclass(frozen=True)
class FluctuationReport:
    speed_msd: float    # Hz^2
    voltage_msd: float  # pu^2


def fluctuation_metrics(ts: TimeSeries, nominal_voltages) -> FluctuationReport:
    """Mean squared frequency deviation and ACVG voltage deviation over the record."""
    if not len(ts):
        raise ValueError("time series is empty")
    nominal = np.asarray(nominal_voltages, dtype=float)
    if nominal.shape != (ts.v_mag.shape[1],):
        raise ValueError(f"expected {ts.v_mag.shape[1]} nominal voltages, got {nominal.shape}")
    speed = float(np.mean(ts.omega_hz ** 2))
    volt = float(np.mean((ts.v_mag - nominal) ** 2)) if nominal.size else 0.0
    return FluctuationReport(speed, volt)


def reduction_pct(without: float, with_control: float) -> float:
    if without <= 0.0:
        return 0.0
    return 100.0 * (1.0 - with_control / without)


def nominal_acvg_voltages(case: NetworkCase) -> np.ndarray:
    return np.array([abs(case.voltage_at(b)) for b in case.acvg_buses])


@dataclass(frozen=True)
class Disturbance:
    """A named single-event experiment."""

    name: str
    duration: float
    events: tuple[DisturbanceEvent, ...]


def standard_disturbances(t_start: float = DEFAULT_FAULT_START) -> list[Disturbance]:
    return [
        Disturbance("bus fault 6", 0.07, tuple(fault_at(6, t_start, 0.07))),
        Disturbance("bus fault 28", 0.07, tuple(fault_at(28, t_start, 0.07))),
        Disturbance("branch trip 3-18", 0.15, tuple(branch_outage("3-18", t_start, 0.15))),
        Disturbance("branch trip 16-21", 0.15, tuple(branch_outage("16-21", t_start, 0.15))),
        Disturbance("load decrease 20% 7", 5.0, tuple(load_step(7, t_start, -0.2, hold=5.0))),
        Disturbance("load increase 20% 29", 5.0, tuple(load_step(29, t_start, 0.2, hold=5.0))),
    ]


@dataclass(frozen=True)
class FluctuationRow:
    disturbance: str
    duration: float
    without: FluctuationReport
    with_control: FluctuationReport

    @property
    def speed_reduction_pct(self) -> float:
        return reduction_pct(self.without.speed_msd, self.with_control.speed_msd)

    @property
    def voltage_reduction_pct(self) -> float:
        return reduction_pct(self.without.voltage_msd, self.with_control.voltage_msd)


def compare_fluctuations(
    case: NetworkCase,
    disturbance: Disturbance,
    fleet: AcvgFleet | None,
    reference: AcvgFleet | None = None,
    **run_kw,
) -> FluctuationRow:
    """Metrics for the reference run (no fleet by default) and the ``fleet`` run."""
    nominal = nominal_acvg_voltages(case)
    base = run_disturbance(case, disturbance.events, reference, **run_kw)
    ctrl = run_disturbance(case, disturbance.events, fleet, **run_kw)
    return FluctuationRow(
        disturbance.name, disturbance.duration,
        fluctuation_metrics(base, nominal), fluctuation_metrics(ctrl, nominal),
    )


# ---------------------------------------------------------------- stability

@dataclass(frozen=True)
class StabilityCriteria:
    max_separation_deg: float = 180.0
    frequency_band_hz: float = 1.0
    settle_window_s: float = 2.0


def is_stable(ts: TimeSeries, criteria: StabilityCriteria = StabilityCriteria()) -> bool:
    """Angle spread below the limit throughout, and every machine inside the
    frequency band over the final settle window."""
    if ts.horizon < criteria.settle_window_s:
        raise ValueError(f"horizon {ts.horizon} s is shorter than the {criteria.settle_window_s} s settle window")
    if ts.status != "completed":
        return False
    if not len(ts):
        raise ValueError("time series is empty")
    if ts.times[-1] < ts.horizon - 1e-9:
        raise ValueError("time series does not reach its horizon")
    if math.degrees(ts.max_angle_separation) >= criteria.max_separation_deg:
        return False
    window = ts.times >= ts.horizon - criteria.settle_window_s - 1e-9
    return bool(np.all(np.abs(ts.omega_hz[window]) < criteria.frequency_band_hz))


# ---------------------------------------------------------------- critical clearing time

@dataclass(frozen=True)
class CclResult:
    bus: int
    t_ccl: float | None
    resolution: float
    stable_at: float | None
    unstable_at: float | None
    bracketed: bool = True
    upper_bound: float = DEFAULT_CCL_UPPER
    simulations: int = 0

    def describe(self) -> str:
        if not self.bracketed:
            return f"ccl > {self.upper_bound} s"
        return f"{self.t_ccl:.4f} s (+/- {self.resolution:.4f})"


def fault_is_stable(
    case: NetworkCase,
    fleet: AcvgFleet | None,
    bus: int,
    duration: float,
    *,
    t_start: float = DEFAULT_FAULT_START,
    horizon: float = DEFAULT_HORIZON,
    dt: float = DEFAULT_DT,
    criteria: StabilityCriteria = StabilityCriteria(),
) -> bool:
    """Verdict for one fault duration; duration 0 means no fault at all."""
    events = fault_at(bus, t_start, duration) if duration > 0 else ()
    ts = run_disturbance(
        case, events, fleet, horizon=horizon, dt=dt,
        stop_on_separation=math.radians(criteria.max_separation_deg),
        raise_on_failure=False,
    )
    return is_stable(ts, criteria)


def find_ccl(
    case: NetworkCase,
    fleet: AcvgFleet | None,
    bus: int,
    resolution: float = DEFAULT_CCL_RESOLUTION,
    horizon: float = DEFAULT_HORIZON,
    *,
    upper: float = DEFAULT_CCL_UPPER,
    t_start: float = DEFAULT_FAULT_START,
    dt: float = DEFAULT_DT,
    criteria: StabilityCriteria = StabilityCriteria(),
) -> CclResult:
    """Bisect the fault duration at ``bus`` down to ``resolution`` (half-width).

    Durations are whole integration steps so every bracket end is a duration
    that was actually simulated.  ``t_ccl`` is the bracket midpoint.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    if t_start + upper > horizon - criteria.settle_window_s:
        raise ValueError("fault window leaves no room for the settle window before the horizon")
    if bus not in case.bus_index:
        raise ValueError(f"unknown bus {bus}")
    verdict_kw = dict(t_start=t_start, horizon=horizon, dt=dt, criteria=criteria)
    runs = 0

    def stable(k: int) -> bool:
        nonlocal runs
        runs += 1
        return fault_is_stable(case, fleet, bus, k * dt, **verdict_kw)

    lo, hi = 0, steps_for(upper, dt, "ccl upper bound")
    if not stable(lo):
        raise RuntimeError(f"undisturbed system is not stable (bus {bus})")
    if stable(hi):
        return CclResult(bus, None, resolution, None, None, bracketed=False, upper_bound=upper, simulations=runs)
    width = max(1, int(math.floor(2.0 * resolution / dt + 1e-9)))
    while hi - lo > width:
        mid = (lo + hi) // 2
        if stable(mid):
            lo = mid
        else:
            hi = mid
    return CclResult(
        bus=bus,
        t_ccl=0.5 * (lo + hi) * dt,
        resolution=0.5 * (hi - lo) * dt,
        stable_at=lo * dt,
        unstable_at=hi * dt,
        upper_bound=upper,
        simulations=runs,
    )


def ccl_increase_pct(base: CclResult, improved: CclResult) -> float | None:
    if not (base.bracketed and improved.bracketed) or not base.t_ccl:
        return None
    return 100.0 * (improved.t_ccl / base.t_ccl - 1.0)


# ---------------------------------------------------------------- sweeps

@dataclass(frozen=True)
class SweepPoint:
    penetration_pct: float
    n_pev: int
    avg_ccl_increase_pct: float | None
    t_ccl: dict = field(default_factory=dict)  # bus -> seconds, None where unbracketed
    gaps: tuple = ()


def _ccl_job(args) -> CclResult:
    case, n_pev, bus, resolution, horizon, kw = args
    kw = dict(kw)
    fleet_kw = kw.pop("fleet_kw", {})
    fleet = build_fleet(case, n_pev, **fleet_kw) if n_pev > 0 else None
    return find_ccl(case, fleet, bus, resolution, horizon, **kw)


def run_ccl_jobs(jobs: list[tuple], workers: int | None = None) -> list[CclResult]:
    """Evaluate ccl jobs, in parallel when allowed; results keep job order."""
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        return [_ccl_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_ccl_job, jobs))


def penetration_sweep(
    case: NetworkCase,
    penetrations: Iterable[float],
    fault_buses: Iterable[int] = BENCHMARK_FAULT_BUSES,
    resolution: float = DEFAULT_CCL_RESOLUTION,
    horizon: float = DEFAULT_HORIZON,
    *,
    workers: int | None = None,
    known: dict | None = None,
    **ccl_kw,
) -> list[SweepPoint]:
    """Average percent increase of t_ccl over ``fault_buses`` per penetration level.

    ``known`` maps ``(n_pev, bus)`` to results already computed with the same
    settings; those searches are skipped.
    """
    pens = sorted(set(float(p) for p in penetrations))
    if 0.0 not in pens:
        raise ValueError("penetrations must include 0 (the baseline)")
    buses = sorted(set(fault_buses))
    known = known or {}
    todo = [(p, b) for p in pens for b in buses if (n_pev_for(p), b) not in known]
    jobs = [(case, n_pev_for(p), b, resolution, horizon, dict(ccl_kw)) for p, b in todo]
    by_key = {(p, b): known[(n_pev_for(p), b)] for p in pens for b in buses if (n_pev_for(p), b) in known}
    by_key.update(zip(todo, run_ccl_jobs(jobs, workers)))
    points = []
    for p in pens:
        increases, gaps, tccl = [], [], {}
        for b in buses:
            r = by_key[(p, b)]
            tccl[b] = r.t_ccl
            inc = ccl_increase_pct(by_key[(0.0, b)], r)
            if inc is None:
                gaps.append(b)
            else:
                increases.append(inc)
        avg = float(np.mean(increases)) if increases else None
        points.append(SweepPoint(p, n_pev_for(p), avg, tccl, tuple(gaps)))
    return points


def sweep_peak(points: Sequence[SweepPoint]) -> SweepPoint | None:
    valid = [p for p in points if p.avg_ccl_increase_pct is not None]
    return max(valid, key=lambda p: p.avg_ccl_increase_pct) if valid else None


# ---------------------------------------------------------------- exports

def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def fluctuation_csv(rows: Sequence[FluctuationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["disturbance", "t_s", "speed_msd_without_hz2", "speed_msd_with_hz2", "speed_reduction_pct",
                "voltage_msd_without_pu2", "voltage_msd_with_pu2", "voltage_reduction_pct"])
    for r in rows:
        w.writerow([r.disturbance, _fmt(r.duration),
                    _fmt(r.without.speed_msd), _fmt(r.with_control.speed_msd), _fmt(r.speed_reduction_pct),
                    _fmt(r.without.voltage_msd), _fmt(r.with_control.voltage_msd), _fmt(r.voltage_reduction_pct)])
    return buf.getvalue()


def ccl_csv(pairs: Sequence[tuple[CclResult, CclResult]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bus", "t_ccl_s", "t_ccl_acvg_s", "increase_pct", "resolution_s"])
    for base, ctrl in pairs:
        w.writerow([base.bus, _fmt(base.t_ccl), _fmt(ctrl.t_ccl), _fmt(ccl_increase_pct(base, ctrl)),
                    _fmt(max(base.resolution, ctrl.resolution))])
    return buf.getvalue()


def sweep_csv(points: Sequence[SweepPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    buses = sorted({b for p in points for b in p.t_ccl})
    w.writerow(["penetration_pct", "n_pev", "avg_ccl_increase_pct", "gaps"] + [f"t_ccl_s_b{b}" for b in buses])
    for p in points:
        w.writerow([_fmt(p.penetration_pct), p.n_pev, _fmt(p.avg_ccl_increase_pct),
                    " ".join(str(g) for g in p.gaps)] + [_fmt(p.t_ccl.get(b)) for b in buses])
    return buf.getvalue()


def summary_json(payload: dict, case: NetworkCase) -> str:
    doc = {"case": case.name, "case_checksum": case.checksum, "calibration": case.calibration}
    doc.update(payload)
    return json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")
