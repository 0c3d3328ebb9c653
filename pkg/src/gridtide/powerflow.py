"""Pre-disturbance AC power flow and classical-machine initialization."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .admittance import assemble_admittance
from .case import CaseError, NetworkCase

PF_TOLERANCE = 1e-8
PF_MAX_ITER = 50


class PowerFlowError(RuntimeError):
    def __init__(self, message: str, solution: PowerFlowSolution | None = None):
        super().__init__(message)
        self.solution = solution


@dataclass(frozen=True)
class PowerFlowSolution:
    bus_ids: tuple[int, ...]
    voltages: np.ndarray
    injections: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float

    def voltage(self, bus: int) -> complex:
        return complex(self.voltages[self.bus_ids.index(bus)])

    def injection(self, bus: int) -> complex:
        return complex(self.injections[self.bus_ids.index(bus)])


def _jacobian(ybus, v, pvpq, pq):
    """Polar power-flow Jacobian [[dP/dθ, dP/d|V|], [dQ/dθ, dQ/d|V|]]."""
    i = ybus @ v
    vnorm = v / np.abs(v)
    ds_dva = 1j * np.diag(v) @ np.conj(np.diag(i) - ybus * v[None, :])
    ds_dvm = np.diag(v) @ np.conj(ybus * vnorm[None, :]) + np.diag(np.conj(i) * vnorm)
    return np.block([
        [ds_dva[np.ix_(pvpq, pvpq)].real, ds_dvm[np.ix_(pvpq, pq)].real],
        [ds_dva[np.ix_(pq, pvpq)].imag, ds_dvm[np.ix_(pq, pq)].imag],
    ])


def solve_power_flow(case: NetworkCase, tol: float = PF_TOLERANCE, max_iter: int = PF_MAX_ITER) -> PowerFlowSolution:
    """Newton-Raphson AC power flow on the full network, loads as constant P/Q.

    Generator buses are PV at their voltage setpoint (no reactive limits); the
    swing machine's bus holds |V| and angle 0.  Raises :class:`PowerFlowError`
    on a singular Jacobian or when ``max_iter`` is exhausted.
    """
    ybus = assemble_admittance(case, include_loads=False).entries
    idx = case.bus_index
    base = case.mva_base
    spec = np.zeros(case.N, dtype=complex)
    for ld in case.loads:
        spec[idx[ld.bus]] -= complex(ld.p_mw, ld.q_mvar) / base
    v = np.ones(case.N, dtype=complex)
    ref = idx[case.swing.bus]
    pv = []
    for g in case.generators:
        k = idx[g.bus]
        v[k] = g.v_setpoint_pu
        if not g.is_swing:
            spec[k] += g.p_mw / base
            pv.append(k)
    pq = [k for k in range(case.N) if k != ref and k not in set(pv)]
    pvpq = sorted(pv) + pq

    def mismatch(v):
        s = v * np.conj(ybus @ v)
        return np.r_[(s - spec)[pvpq].real, (s - spec)[pq].imag]

    f = mismatch(v)
    err = float(np.max(np.abs(f))) if f.size else 0.0
    it = 0
    while err > tol and it < max_iter:
        it += 1
        jac = _jacobian(ybus, v, pvpq, pq)
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            raise PowerFlowError(f"singular power-flow Jacobian at iteration {it}") from None
        va = np.angle(v)
        vm = np.abs(v)
        va[pvpq] += dx[:len(pvpq)]
        vm[pq] += dx[len(pvpq):]
        v = vm * np.exp(1j * va)
        f = mismatch(v)
        err = float(np.max(np.abs(f)))

    sol = PowerFlowSolution(
        bus_ids=case.bus_ids,
        voltages=v,
        injections=v * np.conj(ybus @ v),
        converged=err <= tol,
        iterations=it,
        max_mismatch=err,
    )
    if not sol.converged:
        raise PowerFlowError(f"power flow did not converge in {max_iter} iterations "
                             f"(max mismatch {err:.3e} pu)", sol)
    return sol


def initialize_machine_constants(case: NetworkCase, pf: PowerFlowSolution) -> NetworkCase:
    """Fix EMFs, mechanical powers and load admittances from a solved power flow."""
    if not pf.converged:
        raise CaseError("power flow solution is not converged")
    base = case.mva_base
    gens = []
    for g in case.generators:
        vt = pf.voltage(g.bus)
        p_load, q_load = case.load_at(g.bus)
        s_gen = pf.injection(g.bus) + complex(p_load, q_load) / base
        current = np.conj(s_gen / vt)
        emf = vt + 1j * g.transient_reactance_x * current
        gens.append(replace(g, emf=complex(emf), mech_power_pm=float((emf * np.conj(current)).real)))
    loads = []
    for ld in case.loads:
        vm2 = abs(pf.voltage(ld.bus)) ** 2
        if vm2 == 0.0:
            raise CaseError(f"zero solved voltage at load bus {ld.bus}")
        y_eq = complex(ld.p_mw, -ld.q_mvar) / base / vm2
        loads.append(replace(ld, equivalent_admittance=y_eq))
    return replace(
        case,
        generators=tuple(gens),
        loads=tuple(loads),
        operating_point=tuple(complex(x) for x in pf.voltages),
    )


def initialize(case: NetworkCase) -> tuple[NetworkCase, PowerFlowSolution]:
    """Power flow followed by machine/load initialization."""
    pf = solve_power_flow(case)
    return initialize_machine_constants(case, pf), pf
