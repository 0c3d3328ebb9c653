"""Deterministic CSV/JSON writers for simulation output."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .dynamics import TimeSeries


def header_lines(meta: dict) -> str:
    """Comment block carrying the resolved run configuration, one key per line."""
    return "".join(f"# {key}: {json.dumps(meta[key], sort_keys=True)}\n" for key in sorted(meta))


def timeseries_columns(ts: TimeSeries) -> list[str]:
    return (["t"]
            + [f"omega_hz_g{b}" for b in ts.gen_buses]
            + [f"phi_rad_g{b}" for b in ts.gen_buses]
            + [f"v_pu_b{b}" for b in ts.acvg_buses]
            + [f"p_acvg_mw_b{b}" for b in ts.acvg_buses]
            + ["delta_omega_hz"])


def timeseries_csv(ts: TimeSeries, meta: dict | None = None) -> str:
    buf = io.StringIO()
    if meta:
        buf.write(header_lines(meta))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(timeseries_columns(ts))
    table = np.column_stack([ts.times, ts.omega_hz, ts.phi, ts.v_mag, ts.p_acvg_mw, ts.delta_omega_hz])
    for row in table:
        w.writerow([repr(float(x)) for x in row])
    return buf.getvalue()


def write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def with_header(meta: dict, body: str) -> str:
    return header_lines(meta) + body
