import json

import pytest

from gridtide.cli import main


def run(tmp_path, *argv):
    return main([*argv, "--output-dir", str(tmp_path)]) if argv[0] != "validate" else main(list(argv))


def test_validate(capsys):
    assert main(["validate"]) == 0
    out = capsys.readouterr().out
    assert "39 buses" in out and "17 ACVG buses" in out


def test_validate_bad_case(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"system": {"mva_base": 100, "frequency_hz": 60}, "buses": [{"id": 1}, {"id": 1}]}')
    assert main(["validate", "--case", str(bad)]) == 2
    assert "duplicate bus id" in capsys.readouterr().err
    assert main(["validate", "--case", str(tmp_path / "missing.json")]) == 2


def test_simulate_writes_outputs(tmp_path):
    code = run(tmp_path, "simulate", "--fault-bus", "4", "--fault-start", "0.5", "--fault-duration", "0.05",
               "--horizon", "3", "--n-pev", "50000")
    assert code == 0
    csv_text = (tmp_path / "timeseries.csv").read_text()
    header = [line for line in csv_text.splitlines() if line.startswith("#")]
    assert any(line.startswith("# case_checksum:") for line in header)
    assert any('"fault_duration": 0.05' in line for line in header)
    columns = next(line for line in csv_text.splitlines() if not line.startswith("#")).split(",")
    assert columns[0] == "t" and columns[1] == "omega_hz_g30" and columns[-1] == "delta_omega_hz"
    assert columns.index("phi_rad_g30") == 11 and "v_pu_b3" in columns and "p_acvg_mw_b29" in columns
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["verdict"] == "stable" and summary["status"] == "completed"
    assert summary["calibration"]["target"]["bus"] == 12
    assert summary["final_state"]["t"] == pytest.approx(3.0)


def test_simulate_is_deterministic(tmp_path):
    args = ["simulate", "--step-bus", "20", "--step-fraction", "-0.1", "--step-start", "0.2", "--horizon", "1"]
    assert run(tmp_path / "a", *args) == 0
    assert run(tmp_path / "b", *args) == 0
    a = (tmp_path / "a" / "timeseries.csv").read_text().replace(str(tmp_path / "a"), "")
    b = (tmp_path / "b" / "timeseries.csv").read_text().replace(str(tmp_path / "b"), "")
    assert a == b


@pytest.mark.parametrize("argv", [
    ["simulate", "--fault-bus", "12", "--fault-duration", "0"],
    ["simulate", "--fault-bus", "12"],
    ["simulate", "--dt", "0"],
    ["simulate", "--output-interval", "0.0001"],
    ["simulate", "--fault-bus", "99", "--fault-duration", "0.1"],
    ["simulate", "--fault-bus", "12", "--fault-duration", "0.1", "--horizon", "0.5"],
    ["simulate", "--fault-bus", "12", "--fault-duration", "0.1005"],
    ["ccl", "--buses", "99"],
    ["sweep", "--penetrations", "1,2"],
])
def test_invalid_input_exits_2(tmp_path, argv, capsys):
    assert run(tmp_path, *argv) == 2
    assert capsys.readouterr().err.startswith("error (")


def test_scenario_file_overrides_shortcuts(tmp_path):
    scenario = tmp_path / "s.json"
    scenario.write_text(json.dumps([{"kind": "load_step", "t": 0.2, "bus": 20, "magnitude": -0.1}]))
    assert run(tmp_path, "simulate", "--scenario", str(scenario), "--fault-bus", "12",
               "--fault-duration", "0.1", "--horizon", "1") == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert [ev["kind"] for ev in summary["run"]["events"]] == ["load_step"]


def test_metrics_self_comparison(tmp_path):
    assert run(tmp_path, "metrics", "--fault-bus", "28", "--fault-start", "0.2", "--fault-duration", "0.07",
               "--horizon", "1", "--n-pev", "50000", "--baseline-n-pev", "50000") == 0
    lines = [line for line in (tmp_path / "metrics.csv").read_text().splitlines() if not line.startswith("#")]
    row = lines[1].split(",")
    assert float(row[4]) == 0.0 and float(row[7]) == 0.0


def test_ccl_single_bus_baseline_only(tmp_path, monkeypatch):
    from gridtide import analysis
    monkeypatch.setattr(analysis, "_ccl_job", lambda job: analysis.CclResult(job[2], 0.08, 0.001, 0.079, 0.081, simulations=9))
    assert run(tmp_path, "ccl", "--buses", "16", "--n-pev", "0") == 0
    rows = [line for line in (tmp_path / "ccl.csv").read_text().splitlines() if not line.startswith("#")]
    assert rows[1].split(",")[:3] == ["16", "0.08", ""]


def test_ccl_jobs_forward_fleet_options(tmp_path, monkeypatch):
    from gridtide import analysis
    seen = []

    def fake(case, fleet, bus, resolution, horizon, **kw):
        seen.append((fleet, kw))
        return analysis.CclResult(bus, 0.08, 0.001, 0.079, 0.081)

    monkeypatch.setattr(analysis, "find_ccl", fake)
    assert run(tmp_path, "ccl", "--buses", "16,20", "--n-pev", "50000", "--saturation-mhz", "50") == 0
    assert len(seen) == 4
    assert all("fleet_kw" not in kw for _, kw in seen)
    fleets = [f for f, _ in seen if f is not None]
    assert len(fleets) == 2 and all(f.saturation_hz == 0.05 for f in fleets)
