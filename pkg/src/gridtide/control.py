"""ACVG fleet sizing and the saturated frequency-deviation control law.

Fleet quantities stay in the units vehicles are rated in (kW, kW/Hz).  They are
converted to system per-unit once, in :class:`FleetController`, for the
dynamics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .case import CaseError, NetworkCase

DEFAULT_PER_VEHICLE_KW = 10.0
DEFAULT_SATURATION_MHZ = 100.0


@dataclass(frozen=True)
class AcvgFleet:
    n_pev_total: int
    per_vehicle_kw: float
    acvg_buses: tuple[int, ...]
    bus_share: np.ndarray
    h: np.ndarray
    p_max_bus: np.ndarray
    saturation_hz: float = DEFAULT_SATURATION_MHZ / 1000.0

    @property
    def p_max_total_kw(self) -> float:
        return self.per_vehicle_kw * self.n_pev_total


@dataclass(frozen=True)
class ControlOutput:
    p_acvg: np.ndarray
    saturated: np.ndarray


def build_fleet(
    case: NetworkCase,
    n_pev: int,
    per_vehicle_kw: float = DEFAULT_PER_VEHICLE_KW,
    saturation_mhz: float = DEFAULT_SATURATION_MHZ,
) -> AcvgFleet:
    """Spread ``n_pev`` vehicles over ACVG buses in proportion to their real load."""
    if n_pev < 0:
        raise ValueError("n_pev must be non-negative")
    if per_vehicle_kw < 0 or saturation_mhz <= 0:
        raise ValueError("per_vehicle_kw must be >= 0 and saturation_mhz > 0")
    if case.m == 0:
        raise CaseError("case has no ACVG buses")
    loads = np.array([case.load_at(b)[0] for b in case.acvg_buses])
    total = loads.sum()
    if total <= 0:
        raise CaseError("ACVG buses carry no real load; fleet shares are undefined")
    share = loads / total
    p_max = per_vehicle_kw * n_pev * share
    sat = saturation_mhz / 1000.0
    return AcvgFleet(
        n_pev_total=int(n_pev),
        per_vehicle_kw=float(per_vehicle_kw),
        acvg_buses=case.acvg_buses,
        bus_share=share,
        h=p_max / sat,
        p_max_bus=p_max,
        saturation_hz=sat,
    )


def control_power(delta_omega_hz: float, fleet: AcvgFleet) -> ControlOutput:
    """Per-bus ACVG power in MW for an average frequency deviation in Hz.

    Linear with slope ``h`` inside ±saturation, held at ±``p_max_bus``
    outside it.  Positive output is consumption.
    """
    dw = float(delta_omega_hz)
    sat = fleet.saturation_hz
    if dw <= -sat:
        p_kw = -fleet.p_max_bus
    elif dw <= sat:
        p_kw = fleet.h * dw
    else:
        p_kw = fleet.p_max_bus
    saturated = np.full(len(fleet.acvg_buses), dw <= -sat or dw > sat)
    return ControlOutput(p_acvg=p_kw / 1000.0, saturated=saturated)


def average_frequency_deviation(omega_pu, f_base_hz: float) -> float:
    """Mean speed deviation of all machines, in Hz."""
    omega_pu = np.asarray(omega_pu, dtype=float)
    if omega_pu.size == 0:
        raise ValueError("need at least one machine")
    return float(f_base_hz * omega_pu.mean())


class FleetController:
    """Callable used by the integrator: Δω [Hz] -> ACVG power [pu]."""

    def __init__(self, fleet: AcvgFleet, mva_base: float = 100.0, delay_s: float = 0.0):
        self.fleet = fleet
        self.mva_base = mva_base
        # constant measurement delay; 0 in every reported experiment
        self.delay_s = delay_s

    def __call__(self, delta_omega_hz: float) -> np.ndarray:
        return control_power(delta_omega_hz, self.fleet).p_acvg / self.mva_base
