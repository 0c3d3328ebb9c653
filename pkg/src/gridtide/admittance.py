"""Bus admittance assembly and Kron reduction onto generator-internal + ACVG buses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .case import CaseError, NetworkCase


class ReductionError(CaseError):
    """Eliminated buses have no path to any retained bus."""


@dataclass(frozen=True)
class AdmittanceMatrix:
    entries: np.ndarray
    bus_ids: tuple[int, ...]

    @property
    def order(self) -> int:
        return self.entries.shape[0]

    @property
    def bus_index_map(self) -> dict[int, int]:
        return {b: i for i, b in enumerate(self.bus_ids)}


@dataclass(frozen=True, eq=False)
class ReducedNetwork:
    """Reduced admittance over n generator-internal buses then m ACVG buses."""

    y_red: np.ndarray
    gen_buses: tuple[int, ...]
    acvg_buses: tuple[int, ...]
    # False for generators disconnected by a trip event
    gen_connected: tuple[bool, ...] = ()
    label: str = ""

    def __post_init__(self):
        if not self.gen_connected:
            object.__setattr__(self, "gen_connected", (True,) * len(self.gen_buses))
        self.y_red.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.gen_buses)

    @property
    def m(self) -> int:
        return len(self.acvg_buses)

    @property
    def gen_index(self) -> dict[int, int]:
        return {b: i for i, b in enumerate(self.gen_buses)}

    @property
    def acvg_index(self) -> dict[int, int]:
        return {b: self.n + i for i, b in enumerate(self.acvg_buses)}

    @property
    def G(self) -> np.ndarray:
        return self.y_red.real

    @property
    def B(self) -> np.ndarray:
        return self.y_red.imag

    def blocks(self):
        """(Y_GG, Y_GA, Y_AG, Y_AA) views of the reduced matrix."""
        n = self.n
        y = self.y_red
        return y[:n, :n], y[:n, n:], y[n:, :n], y[n:, n:]


def stamp_branch(y: np.ndarray, i: int, k: int, series: complex, shunt_half: complex, tap: float = 1.0):
    """Add a pi-equivalent branch with an off-nominal tap on the ``i`` side."""
    y[i, i] += (series + shunt_half) / (tap * tap)
    y[k, k] += series + shunt_half
    y[i, k] -= series / tap
    y[k, i] -= series / tap


def assemble_admittance(
    case: NetworkCase,
    include_loads: bool = True,
    *,
    load_scale: Mapping[int, float] | None = None,
    extra_shunts: Mapping[int, complex] | None = None,
    out_of_service: Iterable[str] = (),
) -> AdmittanceMatrix:
    """Full Y_bus in the case's bus order.

    Classical loads enter the diagonal as constant admittances.  The keyword
    arguments apply scenario mutations: per-bus load scaling, additional
    shunts (faults) and extra out-of-service branches.
    """
    idx = case.bus_index
    y = np.zeros((case.N, case.N), dtype=complex)
    tripped = set(out_of_service)
    for br in case.branches:
        if not br.in_service or br.id in tripped:
            continue
        stamp_branch(y, idx[br.from_bus], idx[br.to_bus], br.series_admittance, br.shunt_admittance_half, br.tap)
    if include_loads:
        scale = load_scale or {}
        for ld in case.loads:
            if ld.equivalent_admittance is None:
                raise CaseError(f"load at bus {ld.bus} has no equivalent admittance; initialize the case first")
            y[idx[ld.bus], idx[ld.bus]] += ld.equivalent_admittance * scale.get(ld.bus, 1.0)
    for bus, ysh in (extra_shunts or {}).items():
        y[idx[bus], idx[bus]] += ysh
    return AdmittanceMatrix(entries=y, bus_ids=case.bus_ids)


def _disconnected(y: np.ndarray, keep: list[int], elim: list[int]) -> list[int]:
    """Eliminated indices with no path through nonzero couplings to a kept index."""
    adj = np.abs(y) > 0.0
    reached = np.zeros(y.shape[0], dtype=bool)
    reached[keep] = True
    frontier = list(keep)
    while frontier:
        nxt = np.flatnonzero(adj[frontier].any(axis=0) & ~reached)
        reached[nxt] = True
        frontier = list(nxt)
    return [e for e in elim if not reached[e]]


def kron_reduce(y: np.ndarray, keep: list[int], labels: list | None = None) -> np.ndarray:
    """Schur complement of ``y`` onto the ``keep`` indices."""
    keep = list(keep)
    kept = set(keep)
    elim = [i for i in range(y.shape[0]) if i not in kept]
    if not elim:
        return y[np.ix_(keep, keep)].copy()
    lost = _disconnected(y, keep, elim)
    if lost:
        names = [labels[i] for i in lost] if labels is not None else lost
        raise ReductionError(f"buses {names} have no path to any retained bus")
    ya = y[np.ix_(keep, keep)]
    yb = y[np.ix_(keep, elim)]
    yc = y[np.ix_(elim, elim)]
    try:
        return ya - yb @ np.linalg.solve(yc, y[np.ix_(elim, keep)])
    except np.linalg.LinAlgError:
        names = [labels[i] for i in elim] if labels is not None else elim
        raise ReductionError(f"eliminated block is singular (buses {names})") from None


def augment(y_bus: AdmittanceMatrix, case: NetworkCase, tripped_generators: Iterable[int] = ()):
    """Prepend one fictitious internal bus per generator.

    Returns the augmented matrix and its labels: ``("E", bus)`` for internal
    buses followed by the original bus ids.
    """
    n, N = case.n, y_bus.order
    idx = y_bus.bus_index_map
    tripped = set(tripped_generators)
    y = np.zeros((n + N, n + N), dtype=complex)
    y[n:, n:] = y_bus.entries
    for i, g in enumerate(case.generators):
        if g.bus in tripped:
            continue
        yg = 1.0 / (1j * g.transient_reactance_x)
        stamp_branch(y, i, n + idx[g.bus], yg, 0j)
    labels = [("E", g.bus) for g in case.generators] + list(y_bus.bus_ids)
    return y, labels


def augment_and_reduce(
    y_bus: AdmittanceMatrix,
    case: NetworkCase,
    *,
    tripped_generators: Iterable[int] = (),
    label: str = "",
) -> ReducedNetwork:
    """Augment with generator internal buses and Kron-reduce.

    Retained: internal buses (rows 0..n-1) and ACVG buses (rows n..n+m-1,
    ascending bus id).  Everything else, including generator terminals that
    carry no ACVG, is eliminated.
    """
    tripped = tuple(tripped_generators)
    y_aug, labels = augment(y_bus, case, tripped)
    n = case.n
    idx = y_bus.bus_index_map
    keep = list(range(n)) + [n + idx[b] for b in case.acvg_buses]
    # a tripped machine's internal bus is isolated but still retained
    y_red = kron_reduce(y_aug, keep, labels)
    y_red = 0.5 * (y_red + y_red.T)
    return ReducedNetwork(
        y_red=y_red,
        gen_buses=case.generator_buses,
        acvg_buses=case.acvg_buses,
        gen_connected=tuple(g.bus not in set(tripped) for g in case.generators),
        label=label,
    )


def reduce_case(case: NetworkCase, **mutations) -> ReducedNetwork:
    """Assemble (with loads) and reduce in one call."""
    label = mutations.pop("label", "")
    tripped = mutations.pop("tripped_generators", ())
    return augment_and_reduce(assemble_admittance(case, True, **mutations), case,
                              tripped_generators=tripped, label=label)
