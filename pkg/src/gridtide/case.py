"""Grid case description and JSON loader.

A case file is a single JSON document with ``buses``, ``branches``,
``generators``, ``loads``, ``acvgs`` and a ``system`` object.  Machine data are
given on each machine's own rating and converted here to the system base.
Branch impedances are already per-unit on the system base.

After loading, buses are held in the order generator terminals, ACVG-only
buses, stub buses (each group ascending by id); every matrix built from a case
uses that order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

GENERATOR = "generator"
ACVG = "acvg"
STUB = "stub"


class CaseError(ValueError):
    """Invalid case content (dangling reference, duplicate id, bad value)."""


class CaseParseError(CaseError):
    """The case document could not be parsed."""


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    base_voltage_kv: float = 0.0
    hosts_acvg: bool = False


@dataclass(frozen=True)
class Branch:
    id: str
    from_bus: int
    to_bus: int
    series_admittance: complex
    shunt_admittance_half: complex = 0j
    tap: float = 1.0
    in_service: bool = True


@dataclass(frozen=True)
class Generator:
    """Classical machine, all quantities on the system base.

    ``inertia_m`` is 2H in seconds so that ``M dω/dt = Pm - Pe - Dω`` holds
    with ω as a per-unit speed deviation.
    """

    bus: int
    transient_reactance_x: float
    inertia_m: float
    damping_d: float = 0.0
    p_mw: float = 0.0
    v_setpoint_pu: float = 1.0
    is_swing: bool = False
    emf: complex | None = None
    mech_power_pm: float | None = None

    @property
    def emf_magnitude(self) -> float | None:
        return None if self.emf is None else abs(self.emf)


@dataclass(frozen=True)
class ClassicalLoad:
    bus: int
    p_mw: float
    q_mvar: float
    equivalent_admittance: complex | None = None


@dataclass(frozen=True)
class NetworkCase:
    name: str
    mva_base: float
    frequency_hz: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    loads: tuple[ClassicalLoad, ...]
    acvg_buses: tuple[int, ...]
    calibration: Mapping[str, Any] = field(default_factory=dict)
    checksum: str = ""
    # per-bus solved voltages, filled in by initialize_machine_constants
    operating_point: tuple[complex, ...] | None = None

    @property
    def n(self) -> int:
        return len(self.generators)

    @property
    def m(self) -> int:
        return len(self.acvg_buses)

    @property
    def N(self) -> int:
        return len(self.buses)

    @property
    def bus_ids(self) -> tuple[int, ...]:
        return tuple(b.id for b in self.buses)

    @property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def generator_buses(self) -> tuple[int, ...]:
        return tuple(g.bus for g in self.generators)

    @property
    def swing(self) -> Generator:
        return next(g for g in self.generators if g.is_swing)

    @property
    def initialized(self) -> bool:
        return self.operating_point is not None

    def branch(self, branch_id: str) -> Branch:
        for br in self.branches:
            if br.id == branch_id:
                return br
        raise CaseError(f"unknown branch {branch_id!r}")

    def load_at(self, bus: int) -> tuple[float, float]:
        """Total (MW, MVAr) of classical loads at a bus."""
        p = sum(ld.p_mw for ld in self.loads if ld.bus == bus)
        q = sum(ld.q_mvar for ld in self.loads if ld.bus == bus)
        return p, q

    def voltage_at(self, bus: int) -> complex:
        if self.operating_point is None:
            raise CaseError("case has no solved operating point; run initialize_machine_constants first")
        return self.operating_point[self.bus_index[bus]]

    def with_generators(self, generators) -> NetworkCase:
        return replace(self, generators=tuple(generators))


def _require(obj: Mapping[str, Any], key: str, where: str):
    if not isinstance(obj, Mapping):
        raise CaseParseError(f"{where}: expected an object, got {type(obj).__name__}")
    if key not in obj:
        raise CaseParseError(f"{where}: missing field {key!r}")
    return obj[key]


def _number(obj, key, where, default=None) -> float:
    if default is not None and key not in obj:
        return float(default)
    value = _require(obj, key, where)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise CaseParseError(f"{where}.{key}: expected a number, got {value!r}")
    return float(value)


def _bus_id(obj, key, where) -> int:
    value = _require(obj, key, where)
    if isinstance(value, bool) or not isinstance(value, int):
        raise CaseParseError(f"{where}.{key}: expected an integer bus id, got {value!r}")
    return value


def parse_case(text: str) -> NetworkCase:
    """Parse and validate a case document given as JSON text."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseParseError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    case = case_from_dict(doc)
    return replace(case, checksum=hashlib.sha256(text.encode()).hexdigest())


def load_case(path: str | Path) -> NetworkCase:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CaseParseError(f"{path}: {exc.strerror}") from None
    return parse_case(text)


def bundled_case_path(name: str = "ne39") -> Path:
    return Path(str(resources.files("gridtide") / "data" / f"{name}.json"))


def load_bundled(name: str = "ne39") -> NetworkCase:
    return load_case(bundled_case_path(name))


def case_from_dict(doc: Mapping[str, Any]) -> NetworkCase:
    if not isinstance(doc, Mapping):
        raise CaseParseError("case document must be a JSON object")
    system = _require(doc, "system", "case")
    mva_base = _number(system, "mva_base", "system")
    freq = _number(system, "frequency_hz", "system")
    if mva_base <= 0 or freq <= 0:
        raise CaseError("system: mva_base and frequency_hz must be positive")

    raw_buses = _require(doc, "buses", "case")
    bus_kv: dict[int, float] = {}
    for i, b in enumerate(raw_buses):
        where = f"buses[{i}]"
        bid = _bus_id(b, "id", where)
        if bid in bus_kv:
            raise CaseError(f"{where}: duplicate bus id {bid}")
        bus_kv[bid] = _number(b, "base_kv", where, default=0.0)

    def check_bus(bid: int, where: str) -> int:
        if bid not in bus_kv:
            raise CaseError(f"{where}: unknown bus {bid}")
        return bid

    branches = []
    seen_branch_ids: set[str] = set()
    for i, br in enumerate(_require(doc, "branches", "case")):
        where = f"branches[{i}]"
        f = check_bus(_bus_id(br, "from", where), where)
        t = check_bus(_bus_id(br, "to", where), where)
        if f == t:
            raise CaseError(f"{where}: branch connects bus {f} to itself")
        r = _number(br, "r", where, default=0.0)
        x = _number(br, "x", where)
        if r == 0.0 and x == 0.0:
            raise CaseError(f"{where}: zero series impedance")
        b_total = _number(br, "b", where, default=0.0)
        tap = _number(br, "tap", where, default=1.0)
        if tap <= 0:
            raise CaseError(f"{where}: tap ratio must be positive")
        bid = str(br.get("id", f"{f}-{t}"))
        if bid in seen_branch_ids:
            # parallel circuits need explicit ids
            raise CaseError(f"{where}: duplicate branch id {bid!r}")
        seen_branch_ids.add(bid)
        branches.append(Branch(
            id=bid, from_bus=f, to_bus=t,
            series_admittance=1.0 / complex(r, x),
            shunt_admittance_half=0.5j * b_total,
            tap=tap,
            in_service=bool(br.get("in_service", True)),
        ))

    generators = []
    gen_buses: set[int] = set()
    for i, g in enumerate(_require(doc, "generators", "case")):
        where = f"generators[{i}]"
        bus = check_bus(_bus_id(g, "bus", where), where)
        if bus in gen_buses:
            raise CaseError(f"{where}: second generator at bus {bus}")
        gen_buses.add(bus)
        rating = _number(g, "mva_rating", where, default=mva_base)
        xd = _number(g, "xd_prime", where)
        h = _number(g, "h_s", where)
        if xd <= 0:
            raise CaseError(f"{where}: xd_prime must be positive (bus {bus})")
        if h <= 0 or rating <= 0:
            raise CaseError(f"{where}: h_s and mva_rating must be positive (bus {bus})")
        damping = _number(g, "damping", where, default=0.0)
        if damping < 0:
            raise CaseError(f"{where}: damping must be non-negative (bus {bus})")
        scale = rating / mva_base
        generators.append(Generator(
            bus=bus,
            transient_reactance_x=xd / scale,
            inertia_m=2.0 * h * scale,
            damping_d=damping * scale,
            p_mw=_number(g, "p_mw", where, default=0.0),
            v_setpoint_pu=_number(g, "v_setpoint_pu", where, default=1.0),
            is_swing=bool(g.get("swing", False)),
        ))
    swings = [g.bus for g in generators if g.is_swing]
    if len(swings) != 1:
        detail = f"buses {swings}" if swings else "none marked"
        raise CaseError(f"generators: exactly one swing machine required ({detail})")

    loads = []
    for i, ld in enumerate(doc.get("loads", [])):
        where = f"loads[{i}]"
        loads.append(ClassicalLoad(
            bus=check_bus(_bus_id(ld, "bus", where), where),
            p_mw=_number(ld, "p_mw", where),
            q_mvar=_number(ld, "q_mvar", where, default=0.0),
        ))

    acvg = []
    for i, a in enumerate(doc.get("acvgs", [])):
        where = f"acvgs[{i}]"
        bus = check_bus(_bus_id(a, "bus", where), where)
        if bus in acvg:
            raise CaseError(f"{where}: duplicate ACVG at bus {bus}")
        acvg.append(bus)

    gen_sorted = sorted(generators, key=lambda g: g.bus)
    acvg_set = set(acvg)
    order = (
        [(b, GENERATOR) for b in sorted(gen_buses)]
        + [(b, ACVG) for b in sorted(acvg_set - gen_buses)]
        + [(b, STUB) for b in sorted(set(bus_kv) - gen_buses - acvg_set)]
    )
    buses = tuple(Bus(id=b, kind=k, base_voltage_kv=bus_kv[b], hosts_acvg=b in acvg_set) for b, k in order)
    return NetworkCase(
        name=str(doc.get("name", "")),
        mva_base=mva_base,
        frequency_hz=freq,
        buses=buses,
        branches=tuple(branches),
        generators=tuple(gen_sorted),
        loads=tuple(loads),
        acvg_buses=tuple(sorted(acvg_set)),
        calibration=doc.get("calibration", {}),
    )
