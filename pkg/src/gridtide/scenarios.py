"""Timed disturbances compiled into per-epoch reduced networks.

Every event changes the network state (faulted buses, tripped branches, load
scale factors, tripped machines).  Between consecutive event times the state
is constant, so each epoch gets one pre-reduced network that the integrator
swaps in at the boundary.  Epochs with identical state share one network.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .admittance import ReducedNetwork, ReductionError, reduce_case
from .case import CaseError, NetworkCase

BUS_FAULT = "bus_fault"
BUS_FAULT_CLEAR = "bus_fault_clear"
BRANCH_TRIP = "branch_trip"
BRANCH_RESTORE = "branch_restore"
LOAD_STEP = "load_step"
GENERATOR_TRIP = "generator_trip"

EVENT_KINDS = (BUS_FAULT, BUS_FAULT_CLEAR, BRANCH_TRIP, BRANCH_RESTORE, LOAD_STEP, GENERATOR_TRIP)
BRANCH_KINDS = (BRANCH_TRIP, BRANCH_RESTORE)

# bolted three-phase fault, pu on the system base
DEFAULT_FAULT_ADMITTANCE = -1e6j


class ScenarioError(CaseError):
    """Invalid event list or an epoch whose network cannot be reduced."""


@dataclass(frozen=True)
class DisturbanceEvent:
    kind: str
    t: float
    target: int | str
    magnitude: float = 0.0

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ScenarioError(f"unknown event kind {self.kind!r}; expected one of {', '.join(EVENT_KINDS)}")
        if not self.t >= 0.0:
            raise ScenarioError(f"{self.kind} at t={self.t!r}: event time must be >= 0")
        if self.kind == LOAD_STEP and not self.magnitude > -1.0:
            raise ScenarioError(f"load_step at bus {self.target}: fraction {self.magnitude!r} must exceed -1")

    def to_dict(self) -> dict:
        key = "branch" if self.kind in BRANCH_KINDS else "bus"
        doc = {"kind": self.kind, "t": self.t, key: self.target}
        if self.kind == LOAD_STEP:
            doc["magnitude"] = self.magnitude
        return doc

    @classmethod
    def from_dict(cls, doc: dict, where: str = "event") -> DisturbanceEvent:
        if not isinstance(doc, dict):
            raise ScenarioError(f"{where}: expected an object")
        for key in ("kind", "t"):
            if key not in doc:
                raise ScenarioError(f"{where}: missing field {key!r}")
        kind = doc["kind"]
        key = "branch" if kind in BRANCH_KINDS else "bus"
        target = doc.get(key, doc.get("target"))
        if target is None:
            raise ScenarioError(f"{where}: {kind} needs a {key!r} field")
        try:
            t = float(doc["t"])
            magnitude = float(doc.get("magnitude", 0.0))
            target = str(target) if key == "branch" else int(target)
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"{where}: {exc}") from None
        if kind == LOAD_STEP and "magnitude" not in doc:
            raise ScenarioError(f"{where}: load_step needs a 'magnitude' field")
        return cls(kind, t, target, magnitude)


def fault_at(bus: int, t_on: float, duration: float) -> list[DisturbanceEvent]:
    """Bolted fault at ``bus`` from ``t_on`` for ``duration`` seconds."""
    if not duration > 0.0:
        raise ScenarioError(f"fault duration must be positive, got {duration!r}")
    return [DisturbanceEvent(BUS_FAULT, t_on, bus), DisturbanceEvent(BUS_FAULT_CLEAR, t_on + duration, bus)]


def branch_outage(branch: str, t_on: float, duration: float | None = None) -> list[DisturbanceEvent]:
    """Trip a branch, restoring it after ``duration`` if one is given."""
    events = [DisturbanceEvent(BRANCH_TRIP, t_on, branch)]
    if duration is not None:
        if not duration > 0.0:
            raise ScenarioError(f"trip duration must be positive, got {duration!r}")
        events.append(DisturbanceEvent(BRANCH_RESTORE, t_on + duration, branch))
    return events


def load_step(bus: int, t: float, fraction: float, hold: float | None = None) -> list[DisturbanceEvent]:
    """Scale the load at ``bus`` by ``1 + fraction``; undo it after ``hold`` seconds if given."""
    events = [DisturbanceEvent(LOAD_STEP, t, bus, fraction)]
    if hold is not None:
        if not hold > 0.0:
            raise ScenarioError(f"load step hold must be positive, got {hold!r}")
        events.append(DisturbanceEvent(LOAD_STEP, t + hold, bus, 1.0 / (1.0 + fraction) - 1.0))
    return events


@dataclass(frozen=True)
class NetworkState:
    """Cumulative mutation state; hashable so equal states share a reduction."""

    faulted: frozenset = frozenset()
    tripped_branches: frozenset = frozenset()
    load_scale: tuple = ()  # sorted (bus, factor) pairs, factor != 1
    tripped_generators: frozenset = frozenset()

    def describe(self) -> str:
        parts = []
        if self.faulted:
            parts.append("fault@" + ",".join(str(b) for b in sorted(self.faulted)))
        if self.tripped_branches:
            parts.append("out:" + ",".join(sorted(self.tripped_branches)))
        for bus, f in self.load_scale:
            parts.append(f"load{bus}x{f:.6g}")
        if self.tripped_generators:
            parts.append("gen-off:" + ",".join(str(b) for b in sorted(self.tripped_generators)))
        return " ".join(parts) or "base"


@dataclass(frozen=True)
class Epoch:
    t_start: float
    net: ReducedNetwork
    state: NetworkState
    # faulted buses that host an ACVG fleet
    faulted_acvg: tuple[int, ...] = ()

    @property
    def faulted_buses(self) -> tuple[int, ...]:
        return tuple(sorted(self.state.faulted))


@dataclass(frozen=True)
class DisturbanceScenario:
    events: tuple[DisturbanceEvent, ...]
    epochs: tuple[Epoch, ...]
    fault_admittance: complex = DEFAULT_FAULT_ADMITTANCE

    @property
    def boundaries(self) -> tuple[float, ...]:
        return tuple(ep.t_start for ep in self.epochs[1:])

    @property
    def last_event_time(self) -> float:
        return max((ev.t for ev in self.events), default=0.0)

    def to_json(self) -> str:
        return dump_events(self.events)


def _branch_id(case: NetworkCase, target) -> str:
    name = str(target)
    ids = {br.id for br in case.branches}
    if name in ids:
        return name
    a, sep, b = name.partition("-")
    if sep and f"{b}-{a}" in ids:
        return f"{b}-{a}"
    raise ScenarioError(f"unknown branch {name!r}")


def _apply(state: NetworkState, ev: DisturbanceEvent, case: NetworkCase) -> NetworkState:
    kind = ev.kind
    if kind in BRANCH_KINDS:
        br = _branch_id(case, ev.target)
        if kind == BRANCH_TRIP:
            if br in state.tripped_branches:
                raise ScenarioError(f"t={ev.t}: branch {br} is already out of service")
            return NetworkState(state.faulted, state.tripped_branches | {br}, state.load_scale, state.tripped_generators)
        if br not in state.tripped_branches:
            raise ScenarioError(f"t={ev.t}: branch {br} restored before it was tripped")
        return NetworkState(state.faulted, state.tripped_branches - {br}, state.load_scale, state.tripped_generators)

    bus = ev.target
    if bus not in case.bus_index:
        raise ScenarioError(f"t={ev.t}: unknown bus {bus}")
    if kind == BUS_FAULT:
        if bus in state.faulted:
            raise ScenarioError(f"t={ev.t}: bus {bus} is already faulted")
        return NetworkState(state.faulted | {bus}, state.tripped_branches, state.load_scale, state.tripped_generators)
    if kind == BUS_FAULT_CLEAR:
        if bus not in state.faulted:
            raise ScenarioError(f"t={ev.t}: fault at bus {bus} cleared before it started")
        return NetworkState(state.faulted - {bus}, state.tripped_branches, state.load_scale, state.tripped_generators)
    if kind == LOAD_STEP:
        if not any(ld.bus == bus for ld in case.loads):
            raise ScenarioError(f"t={ev.t}: bus {bus} carries no load to step")
        scale = dict(state.load_scale)
        # rounding lets a step and its inverse land back on exactly 1
        factor = round(scale.get(bus, 1.0) * (1.0 + ev.magnitude), 12)
        if factor == 1.0:
            scale.pop(bus, None)
        else:
            scale[bus] = factor
        return NetworkState(state.faulted, state.tripped_branches, tuple(sorted(scale.items())), state.tripped_generators)
    # generator trip
    if bus not in case.generator_buses:
        raise ScenarioError(f"t={ev.t}: no generator at bus {bus}")
    if bus in state.tripped_generators:
        raise ScenarioError(f"t={ev.t}: generator at bus {bus} is already tripped")
    if len(state.tripped_generators) + 1 >= case.n:
        raise ScenarioError(f"t={ev.t}: tripping generator {bus} would leave no machine in service")
    return NetworkState(state.faulted, state.tripped_branches, state.load_scale, state.tripped_generators | {bus})


def _reduce(case: NetworkCase, state: NetworkState, fault_admittance: complex) -> ReducedNetwork:
    return reduce_case(
        case,
        load_scale=dict(state.load_scale),
        extra_shunts={bus: fault_admittance for bus in state.faulted},
        out_of_service=state.tripped_branches,
        tripped_generators=tuple(sorted(state.tripped_generators)),
        label=state.describe(),
    )


def compile_scenario(
    case: NetworkCase,
    events: Iterable[DisturbanceEvent] = (),
    fault_admittance: complex = DEFAULT_FAULT_ADMITTANCE,
) -> DisturbanceScenario:
    """Validate ``events`` and pre-reduce the network for every epoch.

    Events at the same instant are applied together in list order and open a
    single epoch.  An event at t=0 modifies the first epoch.
    """
    if not case.initialized:
        raise ScenarioError("case must be initialized (power flow solved) before compiling a scenario")
    events = tuple(sorted(events, key=lambda ev: ev.t))  # stable: ties keep list order
    cache: dict[NetworkState, ReducedNetwork] = {}

    def network(state: NetworkState, t: float, i: int) -> ReducedNetwork:
        if state not in cache:
            try:
                cache[state] = _reduce(case, state, fault_admittance)
            except ReductionError as exc:
                raise ScenarioError(f"epoch {i} (t >= {t} s, {state.describe()}): {exc}") from exc
        return cache[state]

    acvg = set(case.acvg_buses)
    state = NetworkState()
    times = sorted({ev.t for ev in events} | {0.0})
    epochs = []
    for i, t in enumerate(times):
        for ev in events:
            if ev.t == t:
                state = _apply(state, ev, case)
        epochs.append(Epoch(
            t_start=t,
            net=network(state, t, i),
            state=state,
            faulted_acvg=tuple(sorted(state.faulted & acvg)),
        ))
    return DisturbanceScenario(events=events, epochs=tuple(epochs), fault_admittance=fault_admittance)


def check_alignment(scenario: DisturbanceScenario, dt: float, horizon: float) -> None:
    """Reject events off the ``dt`` grid or past ``horizon``."""
    for ev in scenario.events:
        if ev.t > horizon + 1e-12:
            raise ScenarioError(f"{ev.kind} at t={ev.t} s lies beyond the horizon {horizon} s")
        k = round(ev.t / dt)
        if abs(k * dt - ev.t) > 1e-9 * max(1.0, ev.t):
            raise ScenarioError(f"{ev.kind} at t={ev.t} s is not on the dt={dt} s step grid")


def parse_events(text: str) -> list[DisturbanceEvent]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario file: {exc.msg} at line {exc.lineno} column {exc.colno}") from None
    if isinstance(doc, dict) and "events" in doc:
        doc = doc["events"]
    if not isinstance(doc, list):
        raise ScenarioError("scenario file: expected a JSON array of events")
    return [DisturbanceEvent.from_dict(item, f"event {i}") for i, item in enumerate(doc)]


def load_events(path: str | Path) -> list[DisturbanceEvent]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario file {path}: {exc.strerror}") from None
    return parse_events(text)


def dump_events(events: Sequence[DisturbanceEvent]) -> str:
    return json.dumps([ev.to_dict() for ev in events], indent=2)
