"""Swing-equation / constant-power-ACVG DAE on a reduced network.

Differential states are rotor angles (rad) and speed deviations (per-unit of
synchronous speed).  The algebraic states are ACVG bus phasors, re-solved by
Newton-Raphson in polar coordinates at every Runge-Kutta stage.  Positive ACVG
power means the fleet consumes power.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from numba import njit

from .admittance import ReducedNetwork
from .case import NetworkCase

NEWTON_TOLERANCE = 1e-8
NEWTON_MAX_ITER = 20
DEFAULT_DT = 1e-3
DEFAULT_OUTPUT_INTERVAL = 1e-2

Controller = Callable[[float], np.ndarray]


class AlgebraicError(RuntimeError):
    """Network equations could not be solved at a Runge-Kutta stage."""

    def __init__(self, message: str, report: AlgebraicSolveReport, t: float | None = None):
        super().__init__(message)
        self.report = report
        self.t = t


@dataclass(frozen=True)
class AlgebraicSolveReport:
    converged: bool
    iterations: int
    final_residual: float
    singular: bool = False


@dataclass(frozen=True)
class Machines:
    """Per-generator constants in reduced-network order."""

    buses: tuple[int, ...]
    emf: np.ndarray
    pm: np.ndarray
    m: np.ndarray
    d: np.ndarray
    f_base: float

    @classmethod
    def from_case(cls, case: NetworkCase) -> Machines:
        if any(g.emf is None for g in case.generators):
            raise ValueError("case generators are not initialized")
        return cls(
            buses=case.generator_buses,
            emf=np.array([abs(g.emf) for g in case.generators]),
            pm=np.array([g.mech_power_pm for g in case.generators]),
            m=np.array([g.inertia_m for g in case.generators]),
            d=np.array([g.damping_d for g in case.generators]),
            f_base=case.frequency_hz,
        )

    @property
    def omega_s(self) -> float:
        return 2.0 * math.pi * self.f_base


@dataclass(frozen=True)
class SystemState:
    t: float
    phi: np.ndarray
    omega: np.ndarray
    acvg_voltage: np.ndarray


def initial_state(case: NetworkCase) -> SystemState:
    """Pre-disturbance equilibrium taken from the case's solved operating point."""
    if not case.initialized:
        raise ValueError("case has no solved operating point")
    return SystemState(
        t=0.0,
        phi=np.array([np.angle(g.emf) for g in case.generators]),
        omega=np.zeros(case.n),
        acvg_voltage=np.array([case.voltage_at(b) for b in case.acvg_buses], dtype=complex),
    )


@lru_cache(maxsize=64)
def _blocks(net: ReducedNetwork):
    y_gg, y_ga, y_ag, y_aa = (np.ascontiguousarray(b) for b in net.blocks())
    # idle fleets make the network linear: V_A = -Y_AA^-1 Y_AG E
    passive = -np.linalg.solve(y_aa, y_ag) if net.m else np.zeros((0, net.n), dtype=complex)
    return y_gg, y_ga, y_ag, y_aa, np.conj(y_aa), passive


def generator_phasors(phi: np.ndarray, emf: np.ndarray) -> np.ndarray:
    return emf * np.exp(1j * phi)


def electrical_power(phi, acvg_voltage, net: ReducedNetwork, emf) -> np.ndarray:
    """Generator electrical powers Re(E_i conj(I_i)) over all retained buses."""
    e = generator_phasors(np.asarray(phi, dtype=float), np.asarray(emf, dtype=float))
    y_gg, y_ga, _, _, _, _ = _blocks(net)
    current = y_gg @ e
    if net.m:
        current = current + y_ga @ acvg_voltage
    return (e * np.conj(current)).real


def acvg_residual(phi, acvg_voltage, acvg_power, net: ReducedNetwork, emf) -> np.ndarray:
    """Stacked real- and reactive-power balance at ACVG buses (pu)."""
    e = generator_phasors(np.asarray(phi, dtype=float), np.asarray(emf, dtype=float))
    _, _, y_ag, y_aa, _, _ = _blocks(net)
    s = acvg_voltage * np.conj(y_ag @ e + y_aa @ acvg_voltage)
    return np.r_[s.real + acvg_power, s.imag]


@njit(cache=True)
def _newton_kernel(source, p, v, y_aa, y_aa_conj, tol, max_iter):
    """Polar Newton on the ACVG power balance.

    Returns (v, iterations, residual, status) with status 0 converged,
    1 out of iterations or non-finite, 2 singular Jacobian.
    """
    m = v.size
    v = v.copy()
    s = v * np.conj(source + y_aa @ v)
    f = np.empty(2 * m)
    f[:m] = s.real + p
    f[m:] = s.imag
    err = np.max(np.abs(f))
    jac = np.empty((2 * m, 2 * m))
    it = 0
    while err > tol:
        if it == max_iter or not np.isfinite(err):
            return v, it, err, 1
        it += 1
        vm = np.abs(v)
        if vm.min() == 0.0:
            return v, it, err, 2
        # dS/dθ = j(diag(S) - W), dS/d|V| = W/|V| + diag(S/|V|), W = V conj(Y) conj(V)^T
        for i in range(m):
            for k in range(m):
                w = v[i] * y_aa_conj[i, k] * np.conj(v[k])
                jac[i, k] = w.imag
                jac[m + i, k] = -w.real
                jac[i, m + k] = w.real / vm[k]
                jac[m + i, m + k] = w.imag / vm[k]
            jac[i, i] -= s[i].imag
            jac[m + i, i] += s[i].real
            jac[i, m + i] += s[i].real / vm[i]
            jac[m + i, m + i] += s[i].imag / vm[i]
        if not np.all(np.isfinite(jac)):
            return v, it, err, 2
        dx = np.linalg.solve(jac, -f)
        for i in range(m):
            v[i] = (vm[i] + dx[m + i]) * np.exp(1j * (np.angle(v[i]) + dx[i]))
        s = v * np.conj(source + y_aa @ v)
        f[:m] = s.real + p
        f[m:] = s.imag
        err = np.max(np.abs(f))
    return v, it, err, 0


def _newton(source, p, v, y_aa, y_aa_conj, tol, max_iter):
    try:
        v, it, err, status = _newton_kernel(source, p, v, y_aa, y_aa_conj, float(tol), int(max_iter))
    except np.linalg.LinAlgError:
        return v, AlgebraicSolveReport(False, 1, float("nan"), singular=True)
    return v, AlgebraicSolveReport(status == 0, int(it), float(err), singular=status == 2)


def passive_voltages(phi, net: ReducedNetwork, emf) -> np.ndarray:
    """ACVG voltages with every ACVG idle (a linear solve)."""
    e = generator_phasors(np.asarray(phi, dtype=float), np.asarray(emf, dtype=float))
    return _blocks(net)[5] @ e


def solve_network(
    phi,
    acvg_power,
    net: ReducedNetwork,
    emf,
    guess,
    tol: float = NEWTON_TOLERANCE,
    max_iter: int = NEWTON_MAX_ITER,
) -> tuple[np.ndarray, AlgebraicSolveReport]:
    """ACVG phasors satisfying the constant-power balance, by polar Newton.

    Starts from ``guess``; on failure retries once from the idle-fleet
    voltage profile.  The report says whether either attempt converged.
    """
    if net.m == 0:
        return np.zeros(0, dtype=complex), AlgebraicSolveReport(True, 0, 0.0)
    e = generator_phasors(np.asarray(phi, dtype=float), np.asarray(emf, dtype=float))
    _, _, y_ag, y_aa, y_aa_conj, passive = _blocks(net)
    p = np.asarray(acvg_power, dtype=float)
    if not p.any():
        return passive @ e, AlgebraicSolveReport(True, 0, 0.0)
    source = y_ag @ e
    v, report = _newton(source, p, np.asarray(guess, dtype=complex), y_aa, y_aa_conj, tol, max_iter)
    if report.converged:
        return v, report
    start = passive @ e
    if np.any(np.abs(start) == 0.0):
        return v, report
    v2, report2 = _newton(source, p, start, y_aa, y_aa_conj, tol, max_iter)
    total = report.iterations + report2.iterations
    return v2, AlgebraicSolveReport(report2.converged, total, report2.final_residual, report2.singular)


def swing_rhs(state: SystemState, net: ReducedNetwork, machines: Machines, acvg_power=None):
    """(dφ/dt, dω/dt) with the ACVG voltages already held by ``state``.

    dφ/dt = ω_s ω and M dω/dt = Pm - D ω - Pe.  Disconnected machines are
    frozen.  ``acvg_power`` is accepted for interface symmetry; the algebraic
    solution in ``state`` already accounts for it.
    """
    pe = electrical_power(state.phi, state.acvg_voltage, net, machines.emf)
    dphi = machines.omega_s * state.omega
    domega = (machines.pm - machines.d * state.omega - pe) / machines.m
    if not all(net.gen_connected):
        off = ~np.asarray(net.gen_connected)
        dphi = np.where(off, 0.0, dphi)
        domega = np.where(off, 0.0, domega)
    return dphi, domega


def average_speed_deviation(omega, net: ReducedNetwork) -> float:
    """Mean per-unit speed deviation over connected machines."""
    if all(net.gen_connected):
        return float(np.mean(omega))
    return float(np.mean(np.asarray(omega)[np.asarray(net.gen_connected)]))


@dataclass
class _Stage:
    """Algebraic solve for one (φ, ω) stage point; keeps the warm start."""

    net: ReducedNetwork
    machines: Machines
    controller: Controller | None
    acvg_mask: np.ndarray | None
    tol: float
    held_delta_omega_hz: float | None = None
    newton_iterations: int = 0

    def power(self, omega) -> np.ndarray:
        if self.controller is None or self.net.m == 0:
            return np.zeros(self.net.m)
        if self.held_delta_omega_hz is not None:
            dw = self.held_delta_omega_hz
        else:
            dw = self.machines.f_base * average_speed_deviation(omega, self.net)
        p = np.asarray(self.controller(dw), dtype=float)
        if self.acvg_mask is not None:
            p = p * self.acvg_mask
        return p

    def solve(self, phi, omega, guess, t):
        p = self.power(omega)
        v, report = solve_network(phi, p, self.net, self.machines.emf, guess, tol=self.tol)
        self.newton_iterations += report.iterations
        if not report.converged:
            raise AlgebraicError(f"ACVG network equations did not converge at t={t:.6f} s "
                                 f"(residual {report.final_residual:.3e} pu)", report, t)
        return v, p

    def rhs(self, phi, omega, v):
        m = self.machines
        pe = electrical_power(phi, v, self.net, m.emf)
        dphi = m.omega_s * omega
        domega = (m.pm - m.d * omega - pe) / m.m
        if not all(self.net.gen_connected):
            off = ~np.asarray(self.net.gen_connected)
            dphi = np.where(off, 0.0, dphi)
            domega = np.where(off, 0.0, domega)
        return dphi, domega


def _rk4(stage: _Stage, state: SystemState, dt: float) -> SystemState:
    t, phi, omega, v1 = state.t, state.phi, state.omega, state.acvg_voltage
    k1p, k1w = stage.rhs(phi, omega, v1)
    p2, w2 = phi + 0.5 * dt * k1p, omega + 0.5 * dt * k1w
    v2, _ = stage.solve(p2, w2, v1, t + 0.5 * dt)
    k2p, k2w = stage.rhs(p2, w2, v2)
    p3, w3 = phi + 0.5 * dt * k2p, omega + 0.5 * dt * k2w
    v3, _ = stage.solve(p3, w3, v2, t + 0.5 * dt)
    k3p, k3w = stage.rhs(p3, w3, v3)
    p4, w4 = phi + dt * k3p, omega + dt * k3w
    v4, _ = stage.solve(p4, w4, v3, t + dt)
    k4p, k4w = stage.rhs(p4, w4, v4)
    phi_new = phi + (dt / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
    omega_new = omega + (dt / 6.0) * (k1w + 2.0 * k2w + 2.0 * k3w + k4w)
    v_new, _ = stage.solve(phi_new, omega_new, v4, t + dt)
    return SystemState(t=t + dt, phi=phi_new, omega=omega_new, acvg_voltage=v_new)


def step(
    state: SystemState,
    dt: float,
    net: ReducedNetwork,
    machines: Machines,
    controller: Controller | None = None,
    *,
    acvg_mask=None,
    tol: float = NEWTON_TOLERANCE,
) -> SystemState:
    """One classical RK4 step with the network re-solved at every stage.

    ``state.acvg_voltage`` must already solve the network at ``state``.  The
    returned state carries the algebraic solution at the new point.  Raises
    :class:`AlgebraicError` if any stage fails.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    stage = _Stage(net, machines, controller, None if acvg_mask is None else np.asarray(acvg_mask, float), tol)
    return _rk4(stage, state, dt)


@dataclass
class TimeSeries:
    """Sampled trajectory.  ``status`` is ``completed`` unless the run stopped early."""

    times: np.ndarray
    gen_buses: tuple[int, ...]
    acvg_buses: tuple[int, ...]
    f_base: float
    mva_base: float
    omega: np.ndarray
    phi: np.ndarray
    v_mag: np.ndarray
    p_acvg_mw: np.ndarray
    delta_omega_hz: np.ndarray
    horizon: float
    status: str = "completed"
    message: str = ""
    stats: dict = field(default_factory=dict)

    @property
    def omega_hz(self) -> np.ndarray:
        """Per-generator frequency deviation in Hz."""
        return self.omega * self.f_base

    @property
    def max_angle_separation(self) -> float:
        if not len(self.times):
            return 0.0
        return float(np.max(np.ptp(self.phi, axis=1)))

    def __len__(self) -> int:
        return len(self.times)


class _Recorder:
    def __init__(self, net, machines, mva_base):
        self.gen_buses = net.gen_buses
        self.acvg_buses = net.acvg_buses
        self.f_base = machines.f_base
        self.mva_base = mva_base
        self.rows: list[tuple] = []

    def record(self, state: SystemState, p_acvg_pu, net):
        dw = self.f_base * average_speed_deviation(state.omega, net)
        self.rows.append((state.t, state.omega.copy(), state.phi.copy(), np.abs(state.acvg_voltage),
                          np.asarray(p_acvg_pu, float) * self.mva_base, dw))

    def finish(self, horizon, status, message, stats) -> TimeSeries:
        n, m = len(self.gen_buses), len(self.acvg_buses)
        k = len(self.rows)
        cols = list(zip(*self.rows)) if self.rows else [[]] * 6
        return TimeSeries(
            times=np.array(cols[0], dtype=float),
            gen_buses=self.gen_buses,
            acvg_buses=self.acvg_buses,
            f_base=self.f_base,
            mva_base=self.mva_base,
            omega=np.array(cols[1], dtype=float).reshape(k, n),
            phi=np.array(cols[2], dtype=float).reshape(k, n),
            v_mag=np.array(cols[3], dtype=float).reshape(k, m),
            p_acvg_mw=np.array(cols[4], dtype=float).reshape(k, m),
            delta_omega_hz=np.array(cols[5], dtype=float),
            horizon=horizon,
            status=status,
            message=message,
            stats=stats,
        )


def steps_for(duration: float, dt: float, what: str = "time") -> int:
    """Number of whole steps in ``duration``; raises if it is off the step grid."""
    k = round(duration / dt)
    if abs(k * dt - duration) > 1e-9 * max(1.0, abs(duration)):
        raise ValueError(f"{what} {duration!r} s is not a multiple of dt={dt!r} s")
    return int(k)


class SimulationError(RuntimeError):
    def __init__(self, message: str, partial: TimeSeries):
        super().__init__(message)
        self.partial = partial


def simulate(
    initial: SystemState,
    horizon: float,
    dt: float,
    scenario,
    controller: Controller | None,
    machines: Machines,
    *,
    output_interval: float = DEFAULT_OUTPUT_INTERVAL,
    stop_on_separation: float | None = None,
    raise_on_failure: bool = True,
    control_delay: float = 0.0,
    tol: float = NEWTON_TOLERANCE,
    mva_base: float = 100.0,
) -> TimeSeries:
    """Fixed-step integration over ``[initial.t, horizon]`` with scheduled events.

    ``scenario`` is a compiled :class:`~gridtide.scenarios.DisturbanceScenario`.
    Each event swaps in its epoch's reduced network at the step boundary where
    it falls, and the ACVG voltages are re-solved there.

    During a fault epoch a failed network solve idles ACVG fleets one at a
    time (see ``idle_next``) and retries; each idling is logged in
    ``stats["forced_idle"]``.  Masks reset at the next epoch.

    ``stop_on_separation`` (radians) ends the run as soon as the rotor-angle
    spread exceeds it; the returned series then has status
    ``angle_separation``.  A network-solve failure raises
    :class:`SimulationError` carrying the partial series, or, with
    ``raise_on_failure=False``, returns it with status ``solver_failure``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if output_interval < dt:
        raise ValueError("output_interval must be at least dt")
    n_steps = steps_for(horizon - initial.t, dt, "horizon")
    out_every = max(1, round(output_interval / dt))
    delay_steps = steps_for(control_delay, dt, "control delay") if control_delay else 0
    epochs = scenario.epochs
    boundaries = []
    for ep in epochs[1:]:
        if ep.t_start > horizon + 1e-12:
            raise ValueError(f"event at t={ep.t_start} s lies beyond the horizon {horizon} s")
        boundaries.append(steps_for(ep.t_start - initial.t, dt, "event time"))

    stats = {"steps": 0, "newton_iterations": 0, "forced_idle": []}
    epoch_i = 0
    state = initial
    history: list[float] = []

    def make_stage(ep, mask):
        return _Stage(ep.net, machines, controller, mask, tol)

    def idle_next(stage, state):
        """Idle one more ACVG fleet for the rest of a fault epoch.

        Fleets at faulted buses go first, then the remaining active fleets in
        order of their idle-network voltage, lowest first.  Returns False when
        nothing is left to idle.
        """
        ep = epochs[epoch_i]
        if controller is None or not ep.faulted_buses:
            return False
        mask = np.ones(stage.net.m) if stage.acvg_mask is None else stage.acvg_mask.copy()
        active = np.flatnonzero(mask)
        if not active.size:
            return False
        col_of = {bus: i for i, bus in enumerate(stage.net.acvg_buses)}
        faulted = [col_of[b] for b in ep.faulted_acvg if mask[col_of[b]]]
        if faulted:
            cols = faulted
        else:
            v_idle = np.abs(passive_voltages(state.phi, stage.net, machines.emf))
            cols = [int(active[np.argmin(v_idle[active])])]
        mask[cols] = 0.0
        stage.acvg_mask = mask
        stats["forced_idle"].append({"buses": [stage.net.acvg_buses[c] for c in cols], "t": round(state.t, 12)})
        return True

    def resolve(stage, state):
        while True:
            try:
                v, p = stage.solve(state.phi, state.omega, state.acvg_voltage, state.t)
                return SystemState(state.t, state.phi, state.omega, v)
            except AlgebraicError:
                if not idle_next(stage, state):
                    raise

    def advance(stage, state):
        while True:
            try:
                return _rk4(stage, state, dt)
            except AlgebraicError:
                if not idle_next(stage, state):
                    raise
            state = resolve(stage, state)

    def record(state, stage):
        if recorder.rows and recorder.rows[-1][0] == state.t:
            return
        recorder.record(state, stage.power(state.omega), stage.net)

    stage = make_stage(epochs[0], None)
    recorder = _Recorder(epochs[0].net, machines, mva_base)
    status, message = "completed", ""
    try:
        state = resolve(stage, state)
        record(state, stage)
        for k in range(n_steps):
            if delay_steps:
                history.append(machines.f_base * average_speed_deviation(state.omega, stage.net))
                stage.held_delta_omega_hz = history[-1 - delay_steps] if len(history) > delay_steps else 0.0
            state = advance(stage, state)
            stats["steps"] += 1
            if epoch_i + 1 < len(epochs) and k + 1 == boundaries[epoch_i]:
                epoch_i += 1
                stats["newton_iterations"] += stage.newton_iterations
                held = stage.held_delta_omega_hz
                stage = make_stage(epochs[epoch_i], None)
                stage.held_delta_omega_hz = held
                # algebraic jump: start from the idle-fleet profile on the new network
                guess = passive_voltages(state.phi, stage.net, machines.emf)
                state = resolve(stage, SystemState(state.t, state.phi, state.omega, guess))
            if (k + 1) % out_every == 0 or k + 1 == n_steps:
                record(state, stage)
            if stop_on_separation is not None:
                live = np.asarray(stage.net.gen_connected)
                if np.ptp(state.phi[live]) > stop_on_separation:
                    record(state, stage)
                    status = "angle_separation"
                    message = f"rotor angle spread exceeded {math.degrees(stop_on_separation):.1f} deg at t={state.t:.3f} s"
                    break
    except AlgebraicError as exc:
        stats["newton_iterations"] += stage.newton_iterations
        ts = recorder.finish(horizon, "solver_failure", str(exc), stats)
        if raise_on_failure:
            raise SimulationError(str(exc), ts) from exc
        return ts
    stats["newton_iterations"] += stage.newton_iterations
    return recorder.finish(horizon, status, message, stats)
