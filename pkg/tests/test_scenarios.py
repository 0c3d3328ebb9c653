import json

import numpy as np
import pytest

from gridtide.admittance import reduce_case
from gridtide.dynamics import Machines, electrical_power, initial_state, passive_voltages
from gridtide.scenarios import (
    DisturbanceEvent,
    ScenarioError,
    branch_outage,
    check_alignment,
    compile_scenario,
    dump_events,
    fault_at,
    load_events,
    load_step,
    parse_events,
)
from dataclasses import replace


def test_empty_scenario_single_epoch(ne39):
    sc = compile_scenario(ne39)
    assert len(sc.epochs) == 1 and sc.epochs[0].t_start == 0.0
    np.testing.assert_array_equal(sc.epochs[0].net.y_red, reduce_case(ne39).y_red)


def test_branch_trip_restore_three_epochs(ne39):
    sc = compile_scenario(ne39, branch_outage("23-24", 1.0, 0.1))
    assert [ep.t_start for ep in sc.epochs] == [0.0, 1.0, pytest.approx(1.1)]
    assert sc.epochs[1].state.tripped_branches == {"23-24"}


def test_load_step_scales_admittance(ne39):
    sc = compile_scenario(ne39, load_step(20, 1.0, -0.10))
    assert len(sc.epochs) == 2
    y_load = next(ld.equivalent_admittance for ld in ne39.loads if ld.bus == 20)
    expected = reduce_case(ne39, load_scale={20: 0.9}).y_red
    np.testing.assert_array_equal(sc.epochs[1].net.y_red, expected)
    assert dict(sc.epochs[1].state.load_scale) == {20: 0.9}
    assert y_load != 0


def test_fault_at_events():
    on, off = fault_at(12, 1.0, 0.23)
    assert (on.kind, on.t, off.kind) == ("bus_fault", 1.0, "bus_fault_clear")
    assert off.t == pytest.approx(1.23)
    a, b = fault_at(6, 1.0, 0.07)
    assert b.t - a.t == pytest.approx(0.07)
    with pytest.raises(ScenarioError):
        fault_at(12, 1.0, 0.0)


@pytest.mark.parametrize("events", [
    fault_at(16, 1.0, 0.1),
    branch_outage("16-21", 1.0, 0.15),
    load_step(29, 1.0, 0.2, hold=5.0),
    load_step(7, 1.0, -0.2, hold=5.0),
    load_step(7, 1.0, -0.37, hold=1.0),
])
def test_revert_exactness(ne39, events):
    sc = compile_scenario(ne39, events)
    assert len(sc.epochs) == 3
    np.testing.assert_allclose(sc.epochs[2].net.y_red, sc.epochs[0].net.y_red, rtol=0, atol=1e-12)


def test_trip_consistency(ne39):
    sc = compile_scenario(ne39, branch_outage("3-18", 1.0))
    pruned = replace(ne39, branches=tuple(br for br in ne39.branches if br.id != "3-18"))
    np.testing.assert_allclose(sc.epochs[1].net.y_red, reduce_case(pruned).y_red, atol=1e-12)


@pytest.mark.parametrize("bus", [6, 16, 32])
def test_fault_severity_saturates(ne39, bus):
    m = Machines.from_case(ne39)
    phi = initial_state(ne39).phi

    def pe(y_fault):
        net = compile_scenario(ne39, fault_at(bus, 1.0, 0.1), fault_admittance=y_fault).epochs[1].net
        return electrical_power(phi, passive_voltages(phi, net, m.emf), net, m.emf)

    base = pe(-1e6j)
    stronger = pe(-1e8j)
    assert np.max(np.abs(stronger - base)) < 1e-3 * np.max(np.abs(base))


def test_generator_trip_epoch(ne39):
    sc = compile_scenario(ne39, [DisturbanceEvent("generator_trip", 1.0, 32)])
    net = sc.epochs[1].net
    g = ne39.generator_buses.index(32)
    assert net.gen_connected[g] is False
    assert not np.any(net.y_red[g])


def test_simultaneous_events_share_an_epoch(ne39):
    events = fault_at(4, 1.0, 0.1) + branch_outage("3-4", 1.0, 0.1)
    sc = compile_scenario(ne39, events)
    assert len(sc.epochs) == 3
    assert sc.epochs[2].net is sc.epochs[0].net  # same state reuses the reduction


@pytest.mark.parametrize("events, message", [
    ([DisturbanceEvent("bus_fault_clear", 1.0, 4)], "cleared before"),
    ([DisturbanceEvent("branch_restore", 1.0, "3-4")], "restored before"),
    (fault_at(99, 1.0, 0.1), "unknown bus"),
    (branch_outage("1-99", 1.0), "unknown branch"),
    (load_step(1, 1.0, 0.1), "no load"),
    ([DisturbanceEvent("generator_trip", 1.0, 4)], "no generator"),
    (fault_at(4, 1.0, 0.1) + fault_at(4, 1.05, 0.1), "already faulted"),
])
def test_invalid_sequences(ne39, events, message):
    with pytest.raises(ScenarioError, match=message):
        compile_scenario(ne39, events)


def test_event_invariants():
    with pytest.raises(ScenarioError):
        DisturbanceEvent("bus_fault", -1.0, 4)
    with pytest.raises(ScenarioError):
        DisturbanceEvent("load_step", 1.0, 4, -1.0)
    with pytest.raises(ScenarioError):
        DisturbanceEvent("explode", 1.0, 4)


def test_islanding_names_epoch(ne39):
    outage = [br.id for br in ne39.branches if 19 in (br.from_bus, br.to_bus)]
    events = [ev for b in outage for ev in branch_outage(b, 1.0)]
    with pytest.raises(ScenarioError, match="epoch 1"):
        compile_scenario(ne39, events)


def test_alignment(ne39):
    sc = compile_scenario(ne39, fault_at(4, 1.0, 0.0705))
    with pytest.raises(ScenarioError, match="step grid"):
        check_alignment(sc, 1e-3, 10.0)
    check_alignment(sc, 5e-4, 10.0)
    with pytest.raises(ScenarioError, match="horizon"):
        check_alignment(sc, 5e-4, 1.05)


def test_file_round_trip(tmp_path):
    events = fault_at(12, 1.0, 0.23) + branch_outage("16-21", 2.0, 0.15) + load_step(20, 3.0, -0.1)
    path = tmp_path / "s.json"
    path.write_text(dump_events(events))
    assert load_events(path) == events
    doc = json.loads(path.read_text())
    assert doc[2] == {"kind": "branch_trip", "t": 2.0, "branch": "16-21"}


@pytest.mark.parametrize("text, message", [
    ("[{", "line 1"),
    ('{"a": 1}', "array"),
    ('[{"kind": "bus_fault"}]', "missing field 't'"),
    ('[{"kind": "load_step", "t": 1, "bus": 3}]', "magnitude"),
    ('[{"kind": "bus_fault", "t": 1}]', "'bus'"),
])
def test_bad_files(text, message):
    with pytest.raises(ScenarioError, match=message):
        parse_events(text)
