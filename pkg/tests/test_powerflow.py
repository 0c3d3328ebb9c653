import numpy as np
import pytest

from gridtide.case import case_from_dict
from gridtide.powerflow import PowerFlowError, initialize, solve_power_flow


def two_bus(p_mw=100.0, x=0.1):
    return case_from_dict({
        "system": {"mva_base": 100.0, "frequency_hz": 60.0},
        "buses": [{"id": 1}, {"id": 2}],
        "branches": [{"from": 1, "to": 2, "x": x}],
        "generators": [
            {"bus": 1, "p_mw": 0, "v_setpoint_pu": 1.0, "xd_prime": 0.2, "h_s": 5, "swing": True},
            {"bus": 2, "p_mw": p_mw, "v_setpoint_pu": 1.0, "xd_prime": 0.2, "h_s": 5},
        ],
    })


def test_two_bus_analytic_angle():
    # lossless line, |V1|=|V2|=1: P = sin(theta2)/x  ->  theta2 = asin(P x)
    pf = solve_power_flow(two_bus(100.0, 0.1))
    assert np.angle(pf.voltage(2)) == pytest.approx(np.arcsin(0.1), abs=1e-10)
    assert pf.injection(1).real == pytest.approx(-1.0, abs=1e-9)


def test_bundled_power_flow(ne39):
    case, pf = initialize(ne39)
    assert pf.converged and pf.max_mismatch < 1e-8
    for g in case.generators:
        assert abs(pf.voltage(g.bus)) == pytest.approx(g.v_setpoint_pu, abs=1e-12)
    assert np.angle(pf.voltage(31)) == 0.0
    # generation balances load plus losses
    total_gen = sum(pf.injection(g.bus).real + case.load_at(g.bus)[0] / 100 for g in case.generators)
    total_load = sum(ld.p_mw for ld in case.loads) / 100
    assert 0 < total_gen - total_load < 0.05 * total_load


def test_machine_initialization(ne39):
    for g in ne39.generators:
        assert g.emf is not None
        if not g.is_swing:
            assert g.mech_power_pm == pytest.approx(g.p_mw / 100, abs=1e-7)


def test_infeasible_transfer_raises():
    with pytest.raises(PowerFlowError):
        solve_power_flow(two_bus(5000.0, 0.5), max_iter=15)
