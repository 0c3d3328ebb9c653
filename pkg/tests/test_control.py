import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridtide.case import CaseError, case_from_dict
from gridtide.control import AcvgFleet, average_frequency_deviation, build_fleet, control_power


def fleet_from_shares(n_pev, shares, per_vehicle_kw=10.0):
    shares = np.asarray(shares, dtype=float)
    p_max = per_vehicle_kw * n_pev * shares
    return AcvgFleet(n_pev, per_vehicle_kw, tuple(range(len(shares))), shares, p_max / 0.1, p_max)


def piecewise_kw(dw, n_pev, share):
    """Hand-written reference of the saturated law, in kW."""
    if dw <= -0.1:
        return -10 * n_pev * share
    if dw <= 0.1:
        return 100 * n_pev * share * dw
    return 10 * n_pev * share


def test_budget_1pct(ne39, fleet_1pct):
    assert fleet_1pct.bus_share.sum() == pytest.approx(1.0, abs=1e-12)
    assert fleet_1pct.p_max_bus.sum() == pytest.approx(500_000.0)  # kW
    np.testing.assert_allclose(fleet_1pct.h, 100 * 50_000 * fleet_1pct.bus_share)


def test_shares_follow_real_load(ne39, fleet_1pct):
    loads = np.array([ne39.load_at(b)[0] for b in ne39.acvg_buses])
    np.testing.assert_allclose(fleet_1pct.bus_share, loads / loads.sum())


@pytest.mark.parametrize("dw, expected_mw, saturated", [
    (0.0, 0.0, False),
    (0.05, 25.0, False),
    (0.2, 50.0, True),
    (-0.2, -50.0, True),
])
def test_hand_examples(dw, expected_mw, saturated):
    out = control_power(dw, fleet_from_shares(50_000, [0.1, 0.9]))
    assert out.p_acvg[0] == pytest.approx(expected_mw, rel=1e-12)
    assert out.saturated[0] == saturated


def test_clamp_engages_at_100_mhz():
    f = fleet_from_shares(50_000, [1.0])
    assert control_power(0.1, f).p_acvg[0] == pytest.approx(500.0, rel=1e-12)
    assert control_power(0.1 + 1e-9, f).p_acvg[0] == 500.0
    assert control_power(0.099, f).p_acvg[0] < 500.0


def test_grid_matches_reference():
    shares = np.array([0.05, 0.15, 0.3, 0.5])
    f = fleet_from_shares(50_000, shares)
    for dw in np.linspace(-0.3, 0.3, 1000):
        got = control_power(dw, f).p_acvg * 1000
        ref = np.array([piecewise_kw(dw, 50_000, s) for s in shares])
        np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-300)


@settings(max_examples=200, deadline=None)
@given(
    shares=st.lists(st.floats(0.01, 1.0), min_size=1, max_size=20),
    n_pev=st.integers(0, 10_000_000),
    dw=st.floats(-5, 5, allow_nan=False, allow_subnormal=False),
)
def test_symmetry_and_budget(shares, n_pev, dw):
    s = np.array(shares) / np.sum(shares)
    f = fleet_from_shares(n_pev, s)
    pos, neg = control_power(dw, f).p_acvg, control_power(-dw, f).p_acvg
    np.testing.assert_allclose(pos, -neg, rtol=0, atol=1e-12 * max(1.0, np.abs(pos).max()))
    assert np.abs(pos).sum() <= 10 * n_pev / 1000 * (1 + 1e-12)
    if dw != 0 and n_pev > 0:
        assert np.all(np.sign(pos) == np.sign(dw))
    if 0 < abs(dw) < 0.1 and n_pev > 0:
        np.testing.assert_allclose(pos / pos[0], s / s[0], rtol=1e-10)


def test_zero_fleet_is_neutral(ne39):
    f = build_fleet(ne39, 0)
    assert not f.h.any() and not f.p_max_bus.any()
    assert not control_power(0.5, f).p_acvg.any()


def test_build_fleet_errors(ne39):
    with pytest.raises(ValueError):
        build_fleet(ne39, -1)
    doc = {
        "system": {"mva_base": 100.0, "frequency_hz": 60.0},
        "buses": [{"id": 1}, {"id": 2}],
        "branches": [{"from": 1, "to": 2, "x": 0.1}],
        "generators": [{"bus": 1, "xd_prime": 0.2, "h_s": 5, "swing": True}],
        "loads": [{"bus": 2, "p_mw": 0.0}],
        "acvgs": [{"bus": 2}],
    }
    with pytest.raises(CaseError, match="no real load"):
        build_fleet(case_from_dict(doc), 10)


@pytest.mark.parametrize("omega, expected", [
    ([0.0, 0.0], 0.0),
    ([0.001, -0.001], 0.0),
    ([0.001, 0.001, 0.001], 0.06),
])
def test_average_frequency_deviation(omega, expected):
    assert average_frequency_deviation(omega, 60.0) == pytest.approx(expected, abs=1e-15)
