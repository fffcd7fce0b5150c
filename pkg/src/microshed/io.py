"""
Trace, event and summary serialisation.

Floats are written with ``repr`` so a file read back reproduces the values
bit for bit; together with sorted JSON keys this keeps output byte-stable
for a fixed seed.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .engine import ShedEvent, SimTrace

EVENT_COLUMNS = ["t", "bus", "unit", "grade", "power", "cause", "iteration"]


class OutputError(OSError):
    pass


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _parse(v: str):
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def _open(path, mode="w"):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return path.open(mode, newline="", encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"{path}: {exc.strerror or exc}") from exc


def emit_trace(trace: SimTrace, path) -> Path:
    """Write one CSV row per simulation step, header first."""
    with _open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trace.columns)
        for row in trace.rows:
            w.writerow([_cell(v) for v in row])
    return Path(path)


def emit_events(events, path) -> Path:
    with _open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_COLUMNS)
        for ev in events:
            w.writerow([_cell(getattr(ev, c)) for c in EVENT_COLUMNS])
    return Path(path)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        # JSON has no NaN/inf
        return v if math.isfinite(v) else None
    return obj


def summary_text(summary: dict) -> str:
    return json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n"


def emit_summary(summary: dict, path) -> Path:
    with _open(path) as fh:
        fh.write(summary_text(summary))
    return Path(path)


def read_trace(path) -> SimTrace:
    with _open(path, "r") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise OutputError(f"{path}: empty trace file")
    return SimTrace(rows[0], [[_parse(v) for v in r] for r in rows[1:]])


def read_events(path) -> list[ShedEvent]:
    with _open(path, "r") as fh:
        reader = csv.DictReader(fh)
        return [
            ShedEvent(float(r["t"]), int(r["bus"]), int(r["unit"]), int(r["grade"]),
                      float(r["power"]), r["cause"], int(r["iteration"]))
            for r in reader
        ]


def read_summary(path) -> dict:
    with _open(path, "r") as fh:
        return json.load(fh)


def summarize_trace(trace: SimTrace, events, n_grades: int) -> dict:
    """Recompute the trace-derived summary fields.

    The engine accumulates in the same order, so the results agree exactly
    with the emitted summary.
    """
    f_col = trace.columns.index("f")
    t_col = trace.columns.index("t")
    f_min, t_min = math.inf, 0.0
    for row in trace.rows:
        if row[f_col] < f_min:
            f_min, t_min = row[f_col], row[t_col]
    by_grade = np.zeros(n_grades)
    by_bus: dict = {}
    for ev in events:
        by_grade[ev.grade - 1] += ev.power
        by_bus[ev.bus] = by_bus.get(ev.bus, 0.0) + ev.power
    return {
        "f_min": float(f_min),
        "t_f_min": float(t_min),
        "shed_total": float(by_grade.sum()),
        "shed_by_grade": [float(x) for x in by_grade],
        "shed_by_bus": {str(k): float(v) for k, v in sorted(by_bus.items())},
    }


def write_run(result, out_dir, stem: str = "") -> dict:
    """Write trace, events and summary of a run into ``out_dir``."""
    out = Path(out_dir)
    prefix = f"{stem}_" if stem else ""
    paths = {
        "trace": out / f"{prefix}trace.csv",
        "events": out / f"{prefix}events.csv",
        "summary": out / f"{prefix}summary.json",
    }
    emit_trace(result.trace, paths["trace"])
    emit_events(result.trace.events, paths["events"])
    emit_summary(result.summary, paths["summary"])
    return paths
