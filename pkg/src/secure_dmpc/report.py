"""Trace, objective and summary files for a finished run."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .closed_loop import ClosedLoopTrace
from .scenario import ObjectiveReport

__all__ = ["emit_report", "trace_columns", "read_trace_csv", "format_summary"]

_VECTOR_FIELDS = ("x", "u", "y", "theta", "duals")


def _fmt(v) -> str:
    return format(float(v), ".17g")


def trace_columns(trace: ClosedLoopTrace) -> list[str]:
    cols = ["k", "agent"]
    for name in _VECTOR_FIELDS:
        cols += [f"{name}_{j}" for j in range(getattr(trace, name).shape[2])]
    return cols + ["e_val", "flag", "iterations", "converged"]


def _rows(trace: ClosedLoopTrace):
    for k in range(trace.n_steps):
        for i, name in enumerate(trace.names):
            row = [str(k), name]
            for field in _VECTOR_FIELDS:
                row += [_fmt(v) for v in getattr(trace, field)[k, i]]
            row += [_fmt(trace.e_val[k, i]), str(int(trace.flag[k, i])),
                    str(int(trace.iterations[k])), str(int(trace.converged[k]))]
            yield row


def read_trace_csv(path) -> dict:
    """Parse a written ``trace.csv`` back into arrays keyed like the trace fields."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    names = list(dict.fromkeys(r[1] for r in rows))
    m = len(names)
    n = len(rows) // m
    col = {h: j for j, h in enumerate(header)}
    out = {"names": names}
    for field in _VECTOR_FIELDS:
        idx = [col[h] for h in header if h.startswith(field + "_") and h[len(field) + 1:].isdigit()]
        out[field] = np.array([[float(r[j]) for j in idx] for r in rows]).reshape(n, m, len(idx))
    out["e_val"] = np.array([float(r[col["e_val"]]) for r in rows]).reshape(n, m)
    out["flag"] = np.array([int(r[col["flag"]]) for r in rows]).reshape(n, m)
    out["iterations"] = np.array([int(r[col["iterations"]]) for r in rows]).reshape(n, m)[:, 0]
    out["converged"] = np.array([int(r[col["converged"]]) for r in rows]).reshape(n, m)[:, 0].astype(bool)
    return out


def format_summary(reports: dict[str, ObjectiveReport]) -> str:
    """Table of objectives per agent and mode, percent error vs the first column."""
    modes = list(reports)
    first = reports[modes[0]]
    head = f"{'Agent':<8}" + "".join(f"{m.capitalize():>28}" for m in modes)
    lines = ["Objective functions J_i (% error)", head, "-" * len(head)]

    def cell(rep, value, pct):
        pct_s = "" if pct is None else f" ({pct:+.4g})"
        return f"{value:>14.6f}{pct_s:>14}"

    for i, name in enumerate(first.names + ["Global"]):
        row = f"{name:<8}"
        for m in modes:
            rep = reports[m]
            if name == "Global":
                row += cell(rep, rep.total, rep.total_percent)
            else:
                row += cell(rep, rep.per_agent[i], None if rep.percent is None else rep.percent[i])
        lines.append(row)
    return "\n".join(lines) + "\n"


def emit_report(trace: ClosedLoopTrace, report: ObjectiveReport, out_dir, *, baseline: ObjectiveReport | None = None):
    """Write ``trace.csv``, ``objectives.json`` and ``summary.txt``; returns their paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        trace_path = out / "trace.csv"
        with open(trace_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(trace_columns(trace))
            writer.writerows(_rows(trace))
        obj_path = out / "objectives.json"
        payload = report.to_dict()
        if baseline is not None:
            payload["baseline"] = baseline.to_dict()
        payload["negotiation"] = {
            "all_converged": bool(trace.converged.all()),
            "max_iterations": int(trace.iterations.max()),
        }
        payload["warnings"] = [list(map(str, w)) for w in trace.warnings]
        obj_path.write_text(json.dumps(payload, indent=2) + "\n")
        tables = {"nominal": baseline} if baseline is not None else {}
        tables[report.mode or "run"] = report
        summary_path = out / "summary.txt"
        summary_path.write_text(format_summary(tables))
    except OSError as exc:
        raise OSError(f"cannot write report under {out}: {exc}") from exc
    return trace_path, obj_path, summary_path
